//! Command surface: TOML run configs, weight archives, feature files and reports.
//!
//! Directory layout under `--out`:
//! `archive/` (manifest.json + one `.wsm` blob per run), `archive_b/` (second
//! network of a cross study), `features/chain<l>.wsf`, and `report/` with
//! `verdict.json`, `accuracy.tsv`, `cmc.tsv` and `cross.tsv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chain::chain_feature;
use crate::error::{Error, Result};
use crate::harness::{
    cross_from_populations, evaluate_population, generate_population, CrossReport, DatasetSource,
    HypothesisConfig, HypothesisRun, Protocol, Verdict,
};
use crate::metric::{ClassifierConfig, WeightSet, DEFAULT_CLASSIFIER_TRAIN_FRACTION};
use crate::net::{Layers, NetKind, NetSpec, TrainConfig, TrainedWeights};
use crate::tasks::DEFAULT_TRAIN_FRACTION;
use crate::tensor::{Matrix, Tensor4};

pub const BLOB_MAGIC: &[u8; 4] = b"WSM1";
pub const FEATURE_MAGIC: &[u8; 4] = b"WSF1";
pub const MANIFEST: &str = "manifest.json";

/// Kind byte and `(dims, values)` arrays of one blob.
pub type BlobArrays = (u8, Vec<(Vec<usize>, Vec<f64>)>);

/// Exit codes of the `wsim` binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const REJECTED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const RUNTIME: i32 = 3;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksSection {
    pub classes_per_task: usize,
    pub seen: usize,
    #[serde(default)]
    pub unseen: usize,
    #[serde(default = "default_data_train_fraction")]
    pub data_train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub runs_per_task: usize,
    #[serde(default = "default_classifier_train_fraction")]
    pub classifier_train_fraction: f64,
    #[serde(default = "default_query_fraction")]
    pub query_fraction: f64,
    #[serde(default = "default_retrieval_k")]
    pub retrieval_k: usize,
    #[serde(default)]
    pub self_gallery: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossSection {
    /// Network whose weights the classifiers trained on `net` are tested on.
    pub net_b: NetSpec,
}

/// TOML run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Existing archive to read instead of generating one; relative to the config file.
    #[serde(default)]
    pub archive: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub tasks: TasksSection,
    pub net: NetSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub cross: Option<CrossSection>,
}

fn default_data_train_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}
fn default_classifier_train_fraction() -> f64 {
    DEFAULT_CLASSIFIER_TRAIN_FRACTION
}
fn default_query_fraction() -> f64 {
    0.2
}
fn default_retrieval_k() -> usize {
    10
}
fn default_alpha() -> f64 {
    0.05
}
fn default_protocol() -> Protocol {
    Protocol::Classification
}
fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, parses and validates a config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Config(format!("config {} does not exist", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        let mut cfg =
            Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSource::Idx { images, labels } = &mut cfg.dataset {
            *images = base.join(&*images);
            *labels = base.join(&*labels);
        }
        if let Some(a) = &mut cfg.archive {
            *a = base.join(&*a);
        }
        cfg.hypothesis().validate()?;
        if let Some(c) = &cfg.cross {
            c.net_b.validate()?;
        }
        Ok(cfg)
    }

    pub fn from_hypothesis(h: &HypothesisConfig) -> Self {
        RunConfig {
            master_seed: h.master_seed,
            alpha: h.alpha,
            protocol: h.protocol,
            normalize: h.normalize,
            archive: None,
            dataset: h.dataset.clone(),
            tasks: TasksSection {
                classes_per_task: h.classes_per_task,
                seen: h.seen_tasks,
                unseen: h.unseen_tasks,
                data_train_fraction: h.data_train_fraction,
            },
            net: h.spec.clone(),
            train: h.train.clone(),
            classifier: h.classifier.clone(),
            evaluation: EvaluationSection {
                runs_per_task: h.runs_per_task,
                classifier_train_fraction: h.classifier_train_fraction,
                query_fraction: h.query_fraction,
                retrieval_k: h.retrieval_k,
                self_gallery: h.self_gallery,
            },
            cross: None,
        }
    }

    pub fn hypothesis(&self) -> HypothesisConfig {
        HypothesisConfig {
            alpha: self.alpha,
            dataset: self.dataset.clone(),
            classes_per_task: self.tasks.classes_per_task,
            seen_tasks: self.tasks.seen,
            unseen_tasks: self.tasks.unseen,
            data_train_fraction: self.tasks.data_train_fraction,
            spec: self.net.clone(),
            train: self.train.clone(),
            runs_per_task: self.evaluation.runs_per_task,
            classifier: self.classifier.clone(),
            classifier_train_fraction: self.evaluation.classifier_train_fraction,
            query_fraction: self.evaluation.query_fraction,
            self_gallery: self.evaluation.self_gallery,
            retrieval_k: self.evaluation.retrieval_k,
            protocol: self.protocol,
            normalize: self.normalize,
            master_seed: self.master_seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

pub fn spec_hash(spec: &NetSpec) -> String {
    sha256_hex(
        serde_json::to_string(spec)
            .expect("spec serializes")
            .as_bytes(),
    )
}

/// Hash of everything that determines the generated weights.
pub fn generation_hash(cfg: &HypothesisConfig) -> String {
    let key = serde_json::json!({
        "dataset": cfg.dataset,
        "classes_per_task": cfg.classes_per_task,
        "tasks": cfg.total_tasks(),
        "data_train_fraction": cfg.data_train_fraction,
        "spec": cfg.spec,
        "train": cfg.train,
        "runs_per_task": cfg.runs_per_task,
        "master_seed": cfg.master_seed,
    });
    sha256_hex(key.to_string().as_bytes())
}

// ---------------------------------------------------------------------------
// weight blobs

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_array(buf: &mut Vec<u8>, dims: &[usize], values: &[f64]) -> Result<()> {
    put_u32(buf, dims.len())?;
    for &d in dims {
        put_u32(buf, d)?;
    }
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

/// Binary blob of one network: weight layers, then bias vectors if any.
pub fn encode_blob(w: &TrainedWeights) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BLOB_MAGIC);
    buf.push(w.spec.kind() as u8);
    put_u32(&mut buf, w.layers.len() + w.biases.len())?;
    for l in 0..w.layers.len() {
        put_array(&mut buf, &w.layers.dims(l), w.layers.flat(l))?;
    }
    for b in &w.biases {
        put_array(&mut buf, &[b.len()], b)?;
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(4).ok_or("array too large")?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

/// Parsed blob: kind byte and `(dims, values)` arrays.
pub fn decode_blob(bytes: &[u8]) -> std::result::Result<BlobArrays, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != BLOB_MAGIC {
        return Err("bad magic, expected WSM1".into());
    }
    let kind = r.take(1)?[0];
    if kind > 1 {
        return Err(format!("unknown network kind {kind}"));
    }
    let count = r.u32()?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let ndim = r.u32()?;
        let dims = (0..ndim)
            .map(|_| r.u32())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or("array too large")?;
        arrays.push((dims, r.f32s(n)?));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((kind, arrays))
}

fn layers_from_arrays(
    spec: &NetSpec,
    kind: u8,
    arrays: Vec<(Vec<usize>, Vec<f64>)>,
) -> std::result::Result<(Layers, Vec<Vec<f64>>), String> {
    if kind != spec.kind() as u8 {
        return Err(format!("blob kind {kind} does not match the manifest spec"));
    }
    let depth = spec.depth();
    let expected = if spec.bias { 2 * depth } else { depth };
    if arrays.len() != expected {
        return Err(format!("{} arrays, expected {expected}", arrays.len()));
    }
    let mut it = arrays.into_iter();
    let layers = match spec.kind() {
        NetKind::Mlp => Layers::Mlp(
            it.by_ref()
                .take(depth)
                .map(|(d, v)| match d.as_slice() {
                    [r, c] => Matrix::new(*r, *c, v).map_err(|e| e.to_string()),
                    _ => Err(format!("mlp layer with dims {d:?}")),
                })
                .collect::<std::result::Result<_, _>>()?,
        ),
        NetKind::Conv => Layers::Conv(
            it.by_ref()
                .take(depth)
                .map(|(d, v)| match d.as_slice() {
                    [a, b, c, e] => Tensor4::new([*a, *b, *c, *e], v).map_err(|e| e.to_string()),
                    _ => Err(format!("conv layer with dims {d:?}")),
                })
                .collect::<std::result::Result<_, _>>()?,
        ),
    };
    layers.check_against(spec).map_err(|e| e.to_string())?;
    let widths = spec.widths();
    let biases = it
        .enumerate()
        .map(|(l, (d, v))| {
            if d != [widths[l + 1]] {
                return Err(format!("bias {} has dims {d:?}", l + 1));
            }
            Ok(v)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((layers, biases))
}

// ---------------------------------------------------------------------------
// archives

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub task_id: usize,
    pub run_index: usize,
    pub run_seed: u64,
    pub spec_hash: String,
    pub crc32: u32,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub spec: NetSpec,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn crc_set(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.crc32).collect()
    }
}

pub fn blob_name(task_id: usize, run_index: usize) -> String {
    format!("task{task_id:04}_run{run_index:04}.wsm")
}

/// Writes every run of `ws` plus the manifest into `dir`.
pub fn write_archive(dir: &Path, ws: &WeightSet, config_hash: &str) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sh = spec_hash(&ws.spec);
    let mut entries = Vec::with_capacity(ws.len());
    for w in &ws.entries {
        let blob = encode_blob(w)?;
        let file = blob_name(w.task_id, w.run_index);
        let path = dir.join(&file);
        fs::write(&path, &blob).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            file,
            task_id: w.task_id,
            run_index: w.run_index,
            run_seed: w.run_seed,
            spec_hash: sh.clone(),
            crc32: crc32fast::hash(&blob),
            train_accuracy: w.final_train_acc,
            test_accuracy: w.final_test_acc,
        });
    }
    let manifest = Manifest {
        format: "WSM1".into(),
        config_hash: config_hash.to_string(),
        spec: ws.spec.clone(),
        entries,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Ingest {
        path: path.clone(),
        reason: e.to_string(),
    })
}

/// Reads an archive back; stored f32 values become the canonical weights.
pub fn read_archive(dir: &Path) -> Result<(Manifest, WeightSet)> {
    let manifest = read_manifest(dir)?;
    let sh = spec_hash(&manifest.spec);
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let path = dir.join(&e.file);
        let ingest = |reason: String| Error::Ingest {
            path: path.clone(),
            reason,
        };
        if e.spec_hash != sh {
            return Err(ingest("spec hash does not match the manifest spec".into()));
        }
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let actual = crc32fast::hash(&bytes);
        if actual != e.crc32 {
            return Err(Error::Checksum {
                path,
                expected: e.crc32,
                actual,
            });
        }
        let (kind, arrays) = decode_blob(&bytes).map_err(ingest)?;
        let (layers, biases) = layers_from_arrays(&manifest.spec, kind, arrays).map_err(ingest)?;
        entries.push(TrainedWeights {
            spec: manifest.spec.clone(),
            layers,
            biases,
            task_id: e.task_id,
            run_index: e.run_index,
            run_seed: e.run_seed,
            final_train_acc: e.train_accuracy,
            final_test_acc: e.test_accuracy,
        });
    }
    let ws = WeightSet::new(manifest.spec.clone(), entries);
    Ok((manifest, ws))
}

// ---------------------------------------------------------------------------
// feature files

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub chain_depth: usize,
    pub feature_dim: usize,
    pub entries: Vec<(usize, Vec<f32>)>,
}

/// Chain-`l` features of every run in `ws`, unit-normalized when `unit`.
pub fn chain_features(ws: &WeightSet, l: usize, unit: bool) -> Result<FeatureFile> {
    let mut entries = Vec::with_capacity(ws.len());
    let mut feature_dim = 0;
    for w in &ws.entries {
        let f = chain_feature(&w.layers, l)?;
        feature_dim = f.feature_dim();
        let values = if unit {
            f.flattened_unit()
        } else {
            f.flattened()
        };
        entries.push((w.task_id, values.into_iter().map(|v| v as f32).collect()));
    }
    Ok(FeatureFile {
        chain_depth: l,
        feature_dim,
        entries,
    })
}

pub fn encode_features(f: &FeatureFile) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut buf, f.entries.len())?;
    put_u32(&mut buf, f.feature_dim)?;
    put_u32(&mut buf, f.chain_depth)?;
    for (task, values) in &f.entries {
        if values.len() != f.feature_dim {
            return Err(Error::Shape(format!(
                "feature of length {} in a {}-dim file",
                values.len(),
                f.feature_dim
            )));
        }
        put_u32(&mut buf, *task)?;
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<FeatureFile, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != FEATURE_MAGIC {
        return Err("bad magic, expected WSF1".into());
    }
    let count = r.u32()?;
    let feature_dim = r.u32()?;
    let chain_depth = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let task = r.u32()?;
        let values = r.f32s(feature_dim)?.into_iter().map(|v| v as f32).collect();
        entries.push((task, values));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(FeatureFile {
        chain_depth,
        feature_dim,
        entries,
    })
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|reason| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainSelection {
    All,
    One(usize),
}

impl std::str::FromStr for ChainSelection {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(ChainSelection::All);
        }
        match s.parse::<usize>() {
            Ok(l) if l >= 1 => Ok(ChainSelection::One(l)),
            _ => Err(format!("chain must be `all` or a depth >= 1, got `{s}`")),
        }
    }
}

impl ChainSelection {
    pub fn depths(self, depth: usize) -> Result<Vec<usize>> {
        match self {
            ChainSelection::All => Ok((1..=depth).collect()),
            ChainSelection::One(l) if l <= depth => Ok(vec![l]),
            ChainSelection::One(l) => Err(Error::Config(format!(
                "chain {l} exceeds network depth {depth}"
            ))),
        }
    }
}

/// Writes `chain<l>.wsf` for each selected depth of the archive in `archive_dir`.
pub fn normalize_archive(
    archive_dir: &Path,
    out_dir: &Path,
    chain: ChainSelection,
    unit: bool,
) -> Result<Vec<PathBuf>> {
    let (_, ws) = read_archive(archive_dir)?;
    write_feature_files(&ws, out_dir, chain, unit)
}

fn write_feature_files(
    ws: &WeightSet,
    out_dir: &Path,
    chain: ChainSelection,
    unit: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for l in chain.depths(ws.spec.depth())? {
        let path = out_dir.join(format!("chain{l}.wsf"));
        let bytes = encode_features(&chain_features(ws, l, unit)?)?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// reports

/// One line of `accuracy.tsv` or `cross.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub chain: usize,
    pub protocol: String,
    /// `normalized` (chain features) or `unnormalized` (raw layers).
    pub features: String,
    /// `train` / `test` for classification, `unseen` for retrieval rank-1.
    pub split: String,
    pub accuracy: f64,
}

const ACCURACY_HEADER: &str = "chain\tprotocol\tfeatures\tsplit\taccuracy";
const CMC_HEADER: &str = "chain\tfeatures\trank\trate";

fn row(chain: usize, protocol: &str, features: &str, split: &str, accuracy: f64) -> AccuracyRow {
    AccuracyRow {
        chain,
        protocol: protocol.into(),
        features: features.into(),
        split: split.into(),
        accuracy,
    }
}

pub fn classification_rows(run: &HypothesisRun) -> Vec<AccuracyRow> {
    run.classification
        .iter()
        .flat_map(|a| {
            [
                row(
                    a.chain,
                    "classification",
                    "normalized",
                    "train",
                    a.normalized_train,
                ),
                row(
                    a.chain,
                    "classification",
                    "normalized",
                    "test",
                    a.normalized_test,
                ),
                row(
                    a.chain,
                    "classification",
                    "unnormalized",
                    "train",
                    a.unnormalized_train,
                ),
                row(
                    a.chain,
                    "classification",
                    "unnormalized",
                    "test",
                    a.unnormalized_test,
                ),
            ]
        })
        .collect()
}

pub fn retrieval_rows(run: &HypothesisRun) -> Vec<AccuracyRow> {
    run.retrieval
        .iter()
        .flat_map(|r| {
            [
                row(
                    r.chain,
                    "retrieval",
                    "normalized",
                    "unseen",
                    r.normalized.rank1(),
                ),
                row(
                    r.chain,
                    "retrieval",
                    "unnormalized",
                    "unseen",
                    r.unnormalized.rank1(),
                ),
            ]
        })
        .collect()
}

pub fn cross_rows(report: &CrossReport) -> Vec<AccuracyRow> {
    let mut rows = Vec::new();
    for c in &report.chains {
        rows.push(row(
            c.chain,
            "classification",
            "normalized",
            "test",
            c.classification,
        ));
        if let Some(r1) = c.retrieval_rank1 {
            rows.push(row(c.chain, "retrieval", "normalized", "unseen", r1));
        }
    }
    rows
}

pub fn format_accuracy_tsv(rows: &[AccuracyRow]) -> String {
    let mut s = String::from(ACCURACY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            r.chain, r.protocol, r.features, r.split, r.accuracy
        );
    }
    s
}

pub fn parse_accuracy_tsv(text: &str) -> std::result::Result<Vec<AccuracyRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(ACCURACY_HEADER) {
        return Err("missing accuracy header".into());
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(format!("bad row `{line}`"));
            }
            Ok(AccuracyRow {
                chain: f[0].parse().map_err(|_| format!("bad chain in `{line}`"))?,
                protocol: f[1].into(),
                features: f[2].into(),
                split: f[3].into(),
                accuracy: f[4]
                    .parse()
                    .map_err(|_| format!("bad accuracy in `{line}`"))?,
            })
        })
        .collect()
}

pub fn read_accuracy_tsv(path: &Path) -> Result<Vec<AccuracyRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_accuracy_tsv(&text).map_err(|reason| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn format_cmc_tsv(run: &HypothesisRun) -> String {
    let mut s = String::from(CMC_HEADER);
    s.push('\n');
    for r in &run.retrieval {
        for (features, res) in [
            ("normalized", &r.normalized),
            ("unnormalized", &r.unnormalized),
        ] {
            for (k, rate) in res.cmc.iter().enumerate() {
                let _ = writeln!(s, "{}\t{features}\t{}\t{rate}", r.chain, k + 1);
            }
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub accepted: bool,
    pub alpha: f64,
    pub protocol: Protocol,
    pub normalized: bool,
    pub per_chain_errors: Vec<crate::harness::ChainError>,
    pub baseline_errors: Vec<crate::harness::ChainError>,
}

impl VerdictReport {
    pub fn new(v: &Verdict, cfg: &HypothesisConfig) -> Self {
        VerdictReport {
            accepted: v.accepted,
            alpha: v.alpha,
            protocol: cfg.protocol,
            normalized: cfg.normalize,
            per_chain_errors: v.per_chain_errors.clone(),
            baseline_errors: v.baseline_errors.clone(),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// commands

/// Options shared by every subcommand.
#[derive(Clone, Debug, PartialEq)]
pub struct Options {
    pub config: PathBuf,
    pub out: PathBuf,
    pub no_normalize: bool,
    pub no_feature_norm: bool,
    pub chain: ChainSelection,
    pub seed: Option<u64>,
}

impl Options {
    pub fn new(config: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Options {
            config: config.into(),
            out: out.into(),
            no_normalize: false,
            no_feature_norm: false,
            chain: ChainSelection::All,
            seed: None,
        }
    }

    /// Loads the config and applies the command-line overrides.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if self.no_normalize {
            cfg.normalize = false;
        }
        if self.no_feature_norm {
            cfg.classifier.feature_norm = false;
        }
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        Ok(cfg)
    }

    pub fn archive_dir(&self) -> PathBuf {
        self.out.join("archive")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }
}

/// What a command produced; decides the exit code.
#[derive(Debug)]
pub enum Outcome {
    Archive(Manifest),
    Features(Vec<PathBuf>),
    Report(Vec<AccuracyRow>),
    Verdict(VerdictReport),
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Verdict(v) if !v.accepted => exit::REJECTED,
            _ => exit::OK,
        }
    }
}

pub fn exit_code_for(e: &Error) -> i32 {
    if e.is_config() {
        exit::CONFIG
    } else {
        exit::RUNTIME
    }
}

/// Caps the global rayon pool at `WSIM_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("WSIM_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        Error::Config(format!(
            "WSIM_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    // a pool that already exists (e.g. in tests) keeps its size
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Generates the weight population into `dir` and reads it back.
fn generate_into(cfg: &HypothesisConfig, dir: &Path) -> Result<(Manifest, WeightSet)> {
    let ws = generate_population(cfg)?;
    write_archive(dir, &ws, &generation_hash(cfg)).map_err(|e| e.in_stage("archive"))?;
    read_archive(dir).map_err(|e| e.in_stage("archive"))
}

/// The configured archive, or a freshly generated one under `--out`.
fn population(opts: &Options, run: &RunConfig) -> Result<WeightSet> {
    let cfg = run.hypothesis();
    match &run.archive {
        Some(dir) => {
            let (_, ws) = read_archive(dir).map_err(|e| e.in_stage("archive"))?;
            if ws.spec != cfg.spec {
                return Err(Error::Config(format!(
                    "archive {} holds {:?}, the config asks for {:?}",
                    dir.display(),
                    ws.spec.arch,
                    cfg.spec.arch
                )));
            }
            Ok(ws)
        }
        None => generate_into(&cfg, &opts.archive_dir()).map(|(_, ws)| ws),
    }
}

pub fn cmd_generate(opts: &Options) -> Result<Outcome> {
    let cfg = opts.run_config()?.hypothesis();
    let (manifest, _) = generate_into(&cfg, &opts.archive_dir())?;
    Ok(Outcome::Archive(manifest))
}

pub fn cmd_normalize(opts: &Options) -> Result<Outcome> {
    let run = opts.run_config()?;
    let ws = population(opts, &run)?;
    let files = write_feature_files(
        &ws,
        &opts.out.join("features"),
        opts.chain,
        run.classifier.feature_norm,
    )?;
    Ok(Outcome::Features(files))
}

fn evaluate(opts: &Options, run: &RunConfig) -> Result<(HypothesisConfig, HypothesisRun)> {
    let cfg = run.hypothesis();
    let ws = population(opts, run)?;
    let result = evaluate_population(&cfg, ws)?;
    Ok((cfg, result))
}

pub fn cmd_classify(opts: &Options) -> Result<Outcome> {
    let mut run = opts.run_config()?;
    run.protocol = Protocol::Classification;
    let (_, result) = evaluate(opts, &run)?;
    let rows = classification_rows(&result);
    write_text(
        &opts.report_dir().join("accuracy.tsv"),
        &format_accuracy_tsv(&rows),
    )?;
    Ok(Outcome::Report(rows))
}

pub fn cmd_retrieve(opts: &Options) -> Result<Outcome> {
    let mut run = opts.run_config()?;
    run.protocol = Protocol::Retrieval;
    let (_, result) = evaluate(opts, &run)?;
    let rows = retrieval_rows(&result);
    write_text(
        &opts.report_dir().join("accuracy.tsv"),
        &format_accuracy_tsv(&rows),
    )?;
    write_text(&opts.report_dir().join("cmc.tsv"), &format_cmc_tsv(&result))?;
    Ok(Outcome::Report(rows))
}

pub fn cmd_hypothesis(opts: &Options) -> Result<Outcome> {
    let run = opts.run_config()?;
    let (cfg, result) = evaluate(opts, &run)?;
    let mut rows = classification_rows(&result);
    rows.extend(retrieval_rows(&result));
    let dir = opts.report_dir();
    write_text(&dir.join("accuracy.tsv"), &format_accuracy_tsv(&rows))?;
    write_text(&dir.join("cmc.tsv"), &format_cmc_tsv(&result))?;
    let verdict = VerdictReport::new(&result.verdict, &cfg);
    let json = serde_json::to_string_pretty(&verdict).expect("verdict serializes");
    write_text(&dir.join("verdict.json"), &(json + "\n"))?;
    Ok(Outcome::Verdict(verdict))
}

pub fn cmd_cross(opts: &Options) -> Result<Outcome> {
    let run = opts.run_config()?;
    let net_b = run
        .cross
        .as_ref()
        .ok_or_else(|| Error::Config("cross needs a [cross] section with net_b".into()))?
        .net_b
        .clone();
    let cfg = run.hypothesis();
    let wa = population(opts, &run)?;
    let wb = if net_b == cfg.spec {
        wa.clone()
    } else {
        let cfg_b = HypothesisConfig {
            spec: net_b,
            ..cfg.clone()
        };
        generate_into(&cfg_b, &opts.out.join("archive_b"))?.1
    };
    let report = cross_from_populations(&cfg, wa, wb)?;
    let rows = cross_rows(&report);
    write_text(
        &opts.report_dir().join("cross.tsv"),
        &format_accuracy_tsv(&rows),
    )?;
    Ok(Outcome::Report(rows))
}
