//! Weight classifiers and weight retrieval.
//!
//! One softmax-regression head per chain depth maps a flattened feature `x`
//! to `q = softmax(theta^T x)` over the seen tasks. Classification scores the
//! argmax on held-out runs of seen tasks; retrieval ranks weights of unseen
//! tasks by cosine similarity of `theta^T x` and reports a CMC curve.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::chain::{chain_feature, unit_norm, ChainFeature};
use crate::error::{Error, Result};
use crate::net::{argmax, NetSpec, TrainedWeights};
use crate::seed;
use crate::tensor::Matrix;

/// Default share of each task's runs used to train the classifiers (60/40).
pub const DEFAULT_CLASSIFIER_TRAIN_FRACTION: f64 = 0.6;

/// Run indices of a [`WeightSet`] used for classifier training and testing.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Trained weights of one network shape across tasks and runs.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub spec: NetSpec,
    pub entries: Vec<TrainedWeights>,
    pub split: Split,
}

impl WeightSet {
    /// Wraps entries with the default 60/40 per-task split.
    pub fn new(spec: NetSpec, entries: Vec<TrainedWeights>) -> Self {
        let mut ws = WeightSet {
            spec,
            entries,
            split: Split::default(),
        };
        ws.resplit(DEFAULT_CLASSIFIER_TRAIN_FRACTION);
        ws
    }

    /// Per task, the first `round(fraction * runs)` runs (by run index, at least
    /// one, and leaving at least one when possible) go to training.
    pub fn resplit(&mut self, train_fraction: f64) {
        let mut split = Split::default();
        for task in self.task_ids() {
            let mut members: Vec<usize> = (0..self.entries.len())
                .filter(|&i| self.entries[i].task_id == task)
                .collect();
            members.sort_by_key(|&i| (self.entries[i].run_index, i));
            let n = members.len();
            let upper = if n > 1 { n - 1 } else { n };
            let k = ((n as f64 * train_fraction).round() as usize).clamp(1.min(n), upper);
            split.train.extend_from_slice(&members[..k]);
            split.test.extend_from_slice(&members[k..]);
        }
        split.train.sort_unstable();
        split.test.sort_unstable();
        self.split = split;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct task ids, ascending.
    pub fn task_ids(&self) -> Vec<usize> {
        self.entries
            .iter()
            .map(|w| w.task_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn train_entries(&self) -> Vec<&TrainedWeights> {
        self.split.train.iter().map(|&i| &self.entries[i]).collect()
    }

    pub fn test_entries(&self) -> Vec<&TrainedWeights> {
        self.split.test.iter().map(|&i| &self.entries[i]).collect()
    }

    /// Entries of the listed tasks, keeping order.
    pub fn filter_tasks(&self, tasks: &[usize]) -> WeightSet {
        let entries = self
            .entries
            .iter()
            .filter(|w| tasks.contains(&w.task_id))
            .cloned()
            .collect();
        WeightSet::new(self.spec.clone(), entries)
    }
}

/// What a classifier reads from a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMode {
    /// The chain feature of the classifier's depth.
    Chain,
    /// The raw layer of the classifier's depth, flattened (the unnormalized baseline).
    RawLayer,
}

/// Feature vector of `w` at depth `l`, optionally scaled to unit Frobenius norm.
pub fn weight_features(
    w: &TrainedWeights,
    l: usize,
    mode: FeatureMode,
    unit: bool,
) -> Result<Vec<f64>> {
    let raw = match mode {
        FeatureMode::Chain => chain_feature(&w.layers, l)?.flattened(),
        FeatureMode::RawLayer => {
            if l == 0 || l > w.layers.len() {
                return Err(Error::Shape(format!(
                    "layer {l} outside 1..={}",
                    w.layers.len()
                )));
            }
            w.layers.flat(l - 1).to_vec()
        }
    };
    Ok(if unit { unit_norm(&raw) } else { raw })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Divide every feature by its Frobenius norm.
    pub feature_norm: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 50,
            lr: 0.01,
            batch_size: 16,
            feature_norm: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainClassifier {
    pub chain_depth: usize,
    /// `feature_dim x M`.
    pub theta: Matrix,
    pub class_count: usize,
    pub feature_dim: usize,
    /// Task id predicted by each output unit.
    pub labels: Vec<usize>,
    pub mode: FeatureMode,
    pub feature_norm: bool,
}

impl ChainClassifier {
    /// A classifier with `theta = 0`.
    pub fn zeros(chain_depth: usize, feature_dim: usize, labels: Vec<usize>) -> Self {
        ChainClassifier {
            chain_depth,
            theta: Matrix::zeros(feature_dim, labels.len()),
            class_count: labels.len(),
            feature_dim,
            labels,
            mode: FeatureMode::Chain,
            feature_norm: true,
        }
    }

    /// Features of `w` as this classifier reads them.
    pub fn features_of(&self, w: &TrainedWeights) -> Result<Vec<f64>> {
        weight_features(w, self.chain_depth, self.mode, self.feature_norm)
    }

    /// Features of a chain feature as this classifier reads them.
    pub fn prepare(&self, f: &ChainFeature) -> Vec<f64> {
        if self.feature_norm {
            f.flattened_unit()
        } else {
            f.flattened()
        }
    }

    /// `theta^T x`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.feature_dim {
            return Err(Error::Data(format!(
                "feature of length {} given to a depth-{} classifier expecting {}",
                x.len(),
                self.chain_depth,
                self.feature_dim
            )));
        }
        let m = self.class_count;
        let mut out = vec![0.0; m];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, t) in out.iter_mut().zip(self.theta.row(i)) {
                *o += xi * t;
            }
        }
        Ok(out)
    }

    /// Predicted task id and class probabilities for a prepared feature vector.
    pub fn classify_vector(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let probs = softmax(&self.project(x)?);
        Ok((self.labels[argmax(&probs)], probs))
    }

    pub fn classify_weights(&self, w: &TrainedWeights) -> Result<(usize, Vec<f64>)> {
        self.classify_vector(&self.features_of(w)?)
    }

    pub fn representation_of(&self, w: &TrainedWeights) -> Result<Vec<f64>> {
        self.project(&self.features_of(w)?)
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy `-log q_target` of logits `z`.
pub fn cross_entropy(z: &[f64], target: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[target]
}

/// Multinomial logistic regression without bias, zero-initialized, mini-batch SGD.
/// Returns `theta` and the mean training loss after every epoch.
pub fn fit_softmax(
    xs: &[Vec<f64>],
    ys: &[usize],
    classes: usize,
    cfg: &ClassifierConfig,
) -> Result<(Matrix, Vec<f64>)> {
    if xs.is_empty() {
        return Err(Error::Data("no training features".into()));
    }
    if cfg.lr.is_nan() || cfg.lr <= 0.0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "classifier lr must be > 0 and batch_size >= 1".into(),
        ));
    }
    let dim = xs[0].len();
    if let Some(i) = xs.iter().position(|x| x.len() != dim) {
        return Err(Error::Data(format!(
            "feature {i} has length {}, expected {dim}",
            xs[i].len()
        )));
    }
    let mut theta = Matrix::zeros(dim, classes);
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let logits = |theta: &Matrix, x: &[f64]| {
        let mut out = vec![0.0; classes];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (o, t) in out.iter_mut().zip(theta.row(i)) {
                    *o += xi * t;
                }
            }
        }
        out
    };
    let mut grad = Matrix::zeros(dim, classes);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
            for &s in chunk {
                let mut q = softmax(&logits(&theta, &xs[s]));
                q[ys[s]] -= 1.0;
                for (i, &xi) in xs[s].iter().enumerate() {
                    if xi != 0.0 {
                        for (g, qk) in grad.row_mut(i).iter_mut().zip(&q) {
                            *g += xi * qk;
                        }
                    }
                }
            }
            let step = cfg.lr / chunk.len() as f64;
            for (t, g) in theta.data_mut().iter_mut().zip(grad.data()) {
                *t -= step * g;
            }
        }
        let loss = xs
            .iter()
            .zip(ys)
            .map(|(x, &y)| cross_entropy(&logits(&theta, x), y))
            .sum::<f64>()
            / xs.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, lr: cfg.lr });
        }
        history.push(loss);
    }
    Ok((theta, history))
}

/// Trains the depth-`l` classifier on the train split of `ws`.
pub fn train_chain_classifier(
    ws: &WeightSet,
    l: usize,
    mode: FeatureMode,
    cfg: &ClassifierConfig,
) -> Result<ChainClassifier> {
    train_chain_classifier_with_history(ws, l, mode, cfg).map(|(c, _)| c)
}

pub fn train_chain_classifier_with_history(
    ws: &WeightSet,
    l: usize,
    mode: FeatureMode,
    cfg: &ClassifierConfig,
) -> Result<(ChainClassifier, Vec<f64>)> {
    let train = ws.train_entries();
    if train.is_empty() {
        return Err(Error::Data("weight set has an empty train split".into()));
    }
    let labels: Vec<usize> = train
        .iter()
        .map(|w| w.task_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let xs: Vec<Vec<f64>> = train
        .iter()
        .map(|w| weight_features(w, l, mode, cfg.feature_norm))
        .collect::<Result<_>>()?;
    let ys: Vec<usize> = train
        .iter()
        .map(|w| {
            labels
                .binary_search(&w.task_id)
                .expect("label collected above")
        })
        .collect();
    let (theta, history) = fit_softmax(&xs, &ys, labels.len(), cfg)?;
    Ok((
        ChainClassifier {
            chain_depth: l,
            feature_dim: theta.rows(),
            class_count: labels.len(),
            theta,
            labels,
            mode,
            feature_norm: cfg.feature_norm,
        },
        history,
    ))
}

/// Predicted task id and probabilities for a chain feature.
pub fn classify(c: &ChainClassifier, f: &ChainFeature) -> Result<(usize, Vec<f64>)> {
    c.classify_vector(&c.prepare(f))
}

/// The pre-softmax projection `theta^T x`, used as the weight representation.
pub fn extract_representation(c: &ChainClassifier, f: &ChainFeature) -> Result<Vec<f64>> {
    c.project(&c.prepare(f))
}

/// Top-1 accuracy of `c` over `weights`.
pub fn accuracy(c: &ChainClassifier, weights: &[&TrainedWeights]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Data("no weights to evaluate".into()));
    }
    let mut correct = 0usize;
    for w in weights {
        if c.classify_weights(w)?.0 == w.task_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / weights.len() as f64)
}

/// Top-1 accuracy of every classifier on the test split of `ws`.
pub fn evaluate_classification(
    classifiers: &[ChainClassifier],
    ws: &WeightSet,
) -> Result<Vec<f64>> {
    let test = ws.test_entries();
    if test.is_empty() {
        return Err(Error::Data("weight set has an empty test split".into()));
    }
    classifiers.iter().map(|c| accuracy(c, &test)).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// `cmc[k - 1]` is the fraction of queries whose first same-task hit has rank `<= k`.
    pub cmc: Vec<f64>,
    /// 1-based rank of each query's first same-task gallery hit.
    pub per_query_ranks: Vec<usize>,
}

impl RetrievalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

/// Ranks `gallery` for every query by descending cosine similarity of
/// representations; ties go to the lower gallery index.
pub fn retrieve(
    c: &ChainClassifier,
    queries: &[&TrainedWeights],
    gallery: &[&TrainedWeights],
    k: usize,
) -> Result<RetrievalResult> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Protocol(
            "retrieval needs queries and a gallery".into(),
        ));
    }
    let gallery_tasks: BTreeSet<usize> = gallery.iter().map(|w| w.task_id).collect();
    if let Some(q) = queries.iter().find(|q| !gallery_tasks.contains(&q.task_id)) {
        return Err(Error::Protocol(format!(
            "query task {} has no gallery entry",
            q.task_id
        )));
    }
    let reps: Vec<Vec<f64>> = gallery
        .iter()
        .map(|w| c.representation_of(w))
        .collect::<Result<_>>()?;
    let mut ranks = Vec::with_capacity(queries.len());
    for q in queries {
        let rq = c.representation_of(q)?;
        let mut scored: Vec<(usize, f64)> = reps
            .iter()
            .enumerate()
            .map(|(i, r)| (i, cosine(&rq, r)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let rank = scored
            .iter()
            .position(|&(i, _)| gallery[i].task_id == q.task_id)
            .expect("query task present in gallery")
            + 1;
        ranks.push(rank);
    }
    Ok(RetrievalResult {
        cmc: cmc_from_ranks(&ranks, k),
        per_query_ranks: ranks,
    })
}

/// CMC curve of length `k` from 1-based first-hit ranks.
pub fn cmc_from_ranks(ranks: &[usize], k: usize) -> Vec<f64> {
    let n = ranks.len().max(1) as f64;
    (1..=k)
        .map(|kk| ranks.iter().filter(|&&r| r <= kk).count() as f64 / n)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Layers};

    fn fake_weights(task: usize, run: usize, w1: Matrix) -> TrainedWeights {
        let cols = w1.cols();
        TrainedWeights {
            spec: NetSpec::mlp(&[w1.rows(), cols, 2], Activation::Relu),
            layers: Layers::Mlp(vec![w1, Matrix::zeros(cols, 2)]),
            biases: Vec::new(),
            task_id: task,
            run_index: run,
            run_seed: (task * 100 + run) as u64,
            final_train_acc: 1.0,
            final_test_acc: 1.0,
        }
    }

    #[test]
    fn zero_theta_gives_uniform_probabilities() {
        let c = ChainClassifier::zeros(1, 4, vec![0, 1, 2, 3, 4]);
        let (pred, probs) = c.classify_vector(&[0.3, -1.0, 2.0, 0.5]).unwrap();
        assert_eq!(pred, 0);
        for p in probs {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_loss_is_ln_m() {
        for m in 2..12 {
            let z = vec![0.0; m];
            for t in 0..m {
                assert!((cross_entropy(&z, t) - (m as f64).ln()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn separable_constants_are_learned() {
        let xs = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let ys = vec![0, 0, 1, 1];
        let (theta, _) = fit_softmax(&xs, &ys, 2, &ClassifierConfig::default()).unwrap();
        let c = ChainClassifier {
            theta,
            ..ChainClassifier::zeros(1, 2, vec![0, 1])
        };
        for (x, &y) in xs.iter().zip(&ys) {
            assert_eq!(c.classify_vector(x).unwrap().0, y);
        }
    }

    #[test]
    fn full_batch_loss_is_monotone() {
        let mut rng = seed::rng(1);
        let xs: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let m = Matrix::random_uniform(1, 6, 1.0, &mut rng);
                let mut v = m.into_data();
                v[i % 3] += 2.0;
                v
            })
            .collect();
        let ys: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let cfg = ClassifierConfig {
            epochs: 100,
            lr: 0.05,
            batch_size: 30,
            ..ClassifierConfig::default()
        };
        let (_, history) = fit_softmax(&xs, &ys, 3, &cfg).unwrap();
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn mismatched_dims_are_data_errors() {
        let c = ChainClassifier::zeros(1, 4, vec![0, 1]);
        assert!(matches!(c.project(&[1.0; 3]), Err(Error::Data(_))));
        let xs = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(matches!(
            fit_softmax(&xs, &[0, 1], 2, &ClassifierConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn representation_copies_hot_coordinate() {
        let mut c = ChainClassifier::zeros(1, 3, vec![0, 1, 2]);
        c.theta = Matrix::identity(3);
        assert_eq!(c.project(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn cmc_is_monotone_and_exhaustive() {
        let ranks = [1, 3, 2, 1, 5];
        let cmc = cmc_from_ranks(&ranks, 5);
        assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(cmc[4], 1.0);
        assert_eq!(cmc[0], 0.4);
    }

    #[test]
    fn exact_copy_is_rank_one() {
        let mut rng = seed::rng(3);
        let ws: Vec<TrainedWeights> = (0..6)
            .map(|i| fake_weights(i % 3, i / 3, Matrix::random_uniform(3, 4, 1.0, &mut rng)))
            .collect();
        let mut c = ChainClassifier::zeros(1, 9, vec![0, 1, 2]);
        c.theta = Matrix::random_uniform(9, 3, 1.0, &mut rng);
        let refs: Vec<&TrainedWeights> = ws.iter().collect();
        let res = retrieve(&c, &refs, &refs, 6).unwrap();
        assert_eq!(res.rank1(), 1.0);
        assert!(res.per_query_ranks.iter().all(|&r| r == 1));
    }

    #[test]
    fn missing_gallery_task_is_protocol_error() {
        let mut rng = seed::rng(4);
        let q = fake_weights(0, 0, Matrix::random_uniform(3, 4, 1.0, &mut rng));
        let g = fake_weights(1, 0, Matrix::random_uniform(3, 4, 1.0, &mut rng));
        let c = ChainClassifier::zeros(1, 9, vec![0, 1]);
        assert!(matches!(
            retrieve(&c, &[&q], &[&g], 1),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn split_is_per_task_and_disjoint() {
        let mut rng = seed::rng(5);
        let entries: Vec<TrainedWeights> = (0..20)
            .map(|i| fake_weights(i / 10, i % 10, Matrix::random_uniform(2, 2, 1.0, &mut rng)))
            .collect();
        let ws = WeightSet::new(entries[0].spec.clone(), entries);
        assert_eq!(ws.split.train.len(), 12);
        assert_eq!(ws.split.test.len(), 8);
        assert!(ws.split.train.iter().all(|i| !ws.split.test.contains(i)));
        for w in ws.train_entries() {
            assert!(w.run_index < 6);
        }
    }
}
