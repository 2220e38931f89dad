//! Learning tasks: datasets, class-disjoint task suites, synthetic blobs and IDX ingestion.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;

/// Distance of every blob mean from the origin.
pub const BLOB_SEPARATION: f64 = 4.0;

/// Default fraction of each class's samples used for training (5:1).
pub const DEFAULT_TRAIN_FRACTION: f64 = 5.0 / 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, feature_dim: usize, num_classes: usize) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::Data(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if s.class_id >= num_classes {
                return Err(Error::Data(format!(
                    "sample {i} has class {} >= {num_classes}",
                    s.class_id
                )));
            }
        }
        Ok(Dataset {
            samples,
            feature_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningTask {
    /// Weight label shared by every network trained on this task.
    pub task_id: usize,
    /// Original dataset classes; position in this list is the remapped label.
    pub class_ids: Vec<usize>,
    pub train_split: Vec<usize>,
    pub test_split: Vec<usize>,
}

impl LearningTask {
    /// Remapped label of an original class id.
    pub fn label_of(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub tasks: Vec<LearningTask>,
    pub classes_per_task: usize,
    pub seed: u64,
}

/// Splits `num_tasks * classes_per_task` shuffled classes of `d` into disjoint tasks,
/// with the default 5:1 train/test split per class.
pub fn partition_into_tasks(
    d: &Dataset,
    classes_per_task: usize,
    num_tasks: usize,
    seed: u64,
) -> Result<TaskSuite> {
    partition_with_split(d, classes_per_task, num_tasks, seed, DEFAULT_TRAIN_FRACTION)
}

pub fn partition_with_split(
    d: &Dataset,
    classes_per_task: usize,
    num_tasks: usize,
    seed: u64,
    train_fraction: f64,
) -> Result<TaskSuite> {
    if classes_per_task == 0 || num_tasks == 0 {
        return Err(Error::Config(
            "classes_per_task and num_tasks must be at least 1".into(),
        ));
    }
    if num_tasks * classes_per_task > d.num_classes {
        return Err(Error::Config(format!(
            "{num_tasks} tasks x {classes_per_task} classes need {} classes, dataset has {}",
            num_tasks * classes_per_task,
            d.num_classes
        )));
    }
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} outside (0, 1]"
        )));
    }

    let mut rng = seed::rng(seed);
    let mut classes: Vec<usize> = (0..d.num_classes).collect();
    classes.shuffle(&mut rng);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.num_classes];
    for (i, s) in d.samples.iter().enumerate() {
        by_class[s.class_id].push(i);
    }

    let tasks = classes
        .chunks(classes_per_task)
        .take(num_tasks)
        .enumerate()
        .map(|(task_id, chunk)| {
            let mut train_split = Vec::new();
            let mut test_split = Vec::new();
            for &c in chunk {
                let mut idx = by_class[c].clone();
                idx.shuffle(&mut rng);
                let n_train = ((idx.len() as f64) * train_fraction).round() as usize;
                let n_train = n_train.clamp(idx.len().min(1), idx.len());
                train_split.extend_from_slice(&idx[..n_train]);
                test_split.extend_from_slice(&idx[n_train..]);
            }
            train_split.sort_unstable();
            test_split.sort_unstable();
            LearningTask {
                task_id,
                class_ids: chunk.to_vec(),
                train_split,
                test_split,
            }
        })
        .collect();

    Ok(TaskSuite {
        tasks,
        classes_per_task,
        seed,
    })
}

/// Isotropic Gaussian blobs with means on a sphere of radius [`BLOB_SEPARATION`].
pub fn synth_gaussian_dataset(
    num_classes: usize,
    feature_dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || feature_dim == 0 || per_class == 0 {
        return Err(Error::Config("blob counts must be at least 1".into()));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!(
            "blob spread must be > 0, got {spread}"
        )));
    }
    let mut rng = seed::rng(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm * BLOB_SEPARATION).collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (class_id, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let features = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spread * z
                })
                .collect();
            samples.push(Sample { features, class_id });
        }
    }
    Dataset::new(samples, feature_dim, num_classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Loads an MNIST-style IDX image/label file pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ingest = |path: &Path, reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    match read_u32_be(&images, 0) {
        Some(IDX_IMAGES_MAGIC) => {}
        Some(m) => return Err(ingest(images_path, format!("bad magic {m:#010x}"))),
        None => return Err(ingest(images_path, "truncated header".into())),
    }
    match read_u32_be(&labels, 0) {
        Some(IDX_LABELS_MAGIC) => {}
        Some(m) => return Err(ingest(labels_path, format!("bad magic {m:#010x}"))),
        None => return Err(ingest(labels_path, "truncated header".into())),
    }

    let (Some(n_images), Some(rows), Some(cols)) = (
        read_u32_be(&images, 4),
        read_u32_be(&images, 8),
        read_u32_be(&images, 12),
    ) else {
        return Err(ingest(images_path, "truncated header".into()));
    };
    let Some(n_labels) = read_u32_be(&labels, 4) else {
        return Err(ingest(labels_path, "truncated header".into()));
    };
    if n_images != n_labels {
        return Err(ingest(
            images_path,
            format!("{n_images} images but {n_labels} labels"),
        ));
    }

    let n = n_images as usize;
    let dim = rows as usize * cols as usize;
    let pixels = &images[16..];
    if pixels.len() < n * dim {
        return Err(ingest(
            images_path,
            format!("expected {} pixel bytes, found {}", n * dim, pixels.len()),
        ));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < n {
        return Err(ingest(
            labels_path,
            format!("expected {n} label bytes, found {}", label_bytes.len()),
        ));
    }

    let samples: Vec<Sample> = (0..n)
        .map(|i| Sample {
            features: pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect(),
            class_id: usize::from(label_bytes[i]),
        })
        .collect();
    let num_classes = samples.iter().map(|s| s.class_id + 1).max().unwrap_or(0);
    Dataset::new(samples, dim, num_classes)
}

/// A task's train/test data, relabelled and standardized with train-split statistics.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task_id: usize,
    pub num_classes: usize,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
}

impl TaskData {
    pub fn materialize(d: &Dataset, task: &LearningTask) -> Result<TaskData> {
        let gather = |split: &[usize]| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
            let mut xs = Vec::with_capacity(split.len());
            let mut ys = Vec::with_capacity(split.len());
            for &i in split {
                let s = d.samples.get(i).ok_or_else(|| {
                    Error::Data(format!("task {} references sample {i}", task.task_id))
                })?;
                let y = task.label_of(s.class_id).ok_or_else(|| {
                    Error::Data(format!(
                        "sample {i} (class {}) is not in task {}",
                        s.class_id, task.task_id
                    ))
                })?;
                xs.push(s.features.clone());
                ys.push(y);
            }
            Ok((xs, ys))
        };
        let (mut train, train_y) = gather(&task.train_split)?;
        let (mut test, test_y) = gather(&task.test_split)?;

        let dim = d.feature_dim;
        let n = train.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for x in &train {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for x in &train {
            for ((s, v), m) in std.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        for x in train.iter_mut().chain(test.iter_mut()) {
            for ((v, m), s) in x.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }

        let to_matrix = |rows: Vec<Vec<f64>>| {
            let r = rows.len();
            Matrix::new(r, dim, rows.concat())
        };
        Ok(TaskData {
            task_id: task.task_id,
            num_classes: task.num_classes(),
            train_x: to_matrix(train)?,
            train_y,
            test_x: to_matrix(test)?,
            test_y,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny(num_classes: usize, per_class: usize) -> Dataset {
        synth_gaussian_dataset(num_classes, 3, per_class, 1.0, 5).unwrap()
    }

    #[test]
    fn fifty_disjoint_tasks_cover_all_classes() {
        let d = tiny(100, 6);
        let suite = partition_into_tasks(&d, 2, 50, 9).unwrap();
        assert_eq!(suite.tasks.len(), 50);
        let all: HashSet<usize> = suite
            .tasks
            .iter()
            .flat_map(|t| t.class_ids.clone())
            .collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn single_task_covers_dataset() {
        let d = tiny(4, 6);
        let suite = partition_into_tasks(&d, 4, 1, 0).unwrap();
        let t = &suite.tasks[0];
        let mut classes = t.class_ids.clone();
        classes.sort_unstable();
        assert_eq!(classes, vec![0, 1, 2, 3]);
        assert_eq!(t.train_split.len() + t.test_split.len(), d.len());
        assert_eq!(t.train_split.len(), 20);
    }

    #[test]
    fn partition_is_deterministic() {
        let d = tiny(12, 6);
        assert_eq!(
            partition_into_tasks(&d, 3, 4, 77).unwrap(),
            partition_into_tasks(&d, 3, 4, 77).unwrap()
        );
        assert_ne!(
            partition_into_tasks(&d, 3, 4, 77).unwrap(),
            partition_into_tasks(&d, 3, 4, 78).unwrap()
        );
    }

    #[test]
    fn insufficient_classes_is_config_error() {
        let d = tiny(5, 2);
        assert!(matches!(
            partition_into_tasks(&d, 2, 3, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn blobs_are_balanced() {
        let d = synth_gaussian_dataset(2, 4, 10, 0.5, 1).unwrap();
        assert_eq!(d.len(), 20);
        assert_eq!(d.samples.iter().filter(|s| s.class_id == 0).count(), 10);
    }

    #[test]
    fn tiny_spread_collapses_to_mean() {
        let d = synth_gaussian_dataset(3, 5, 4, 1e-300, 2).unwrap();
        for c in 0..3 {
            let members: Vec<_> = d.samples.iter().filter(|s| s.class_id == c).collect();
            for m in &members[1..] {
                assert_eq!(m.features, members[0].features);
            }
            let norm: f64 = members[0]
                .features
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - BLOB_SEPARATION).abs() < 1e-9);
        }
    }

    #[test]
    fn blob_parameters_validated() {
        assert!(synth_gaussian_dataset(0, 2, 2, 1.0, 0).is_err());
        assert!(synth_gaussian_dataset(2, 2, 2, 0.0, 0).is_err());
    }

    #[test]
    fn materialized_labels_are_remapped_and_standardized() {
        let d = tiny(6, 12);
        let suite = partition_into_tasks(&d, 3, 2, 4).unwrap();
        let data = TaskData::materialize(&d, &suite.tasks[1]).unwrap();
        let labels: HashSet<usize> = data.train_y.iter().copied().collect();
        assert_eq!(labels, HashSet::from([0, 1, 2]));
        for c in 0..data.train_x.cols() {
            let n = data.train_x.rows() as f64;
            let mean: f64 = (0..data.train_x.rows())
                .map(|r| data.train_x[(r, c)])
                .sum::<f64>()
                / n;
            let var: f64 = (0..data.train_x.rows())
                .map(|r| (data.train_x[(r, c)] - mean).powi(2))
                .sum::<f64>()
                / n;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
