//! Hypothesis-training-testing.
//!
//! The null hypothesis is that all SGD runs of one network on one task are
//! equivalent. The harness turns it into labels: every run of task `j` gets
//! weight class `j`. If a classifier trained on some runs labels held-out runs
//! (and ranks runs of unseen tasks) with error below `alpha` on every chain
//! depth, the hypothesis is accepted.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{
    accuracy, retrieve, train_chain_classifier, ChainClassifier, ClassifierConfig, FeatureMode,
    RetrievalResult, WeightSet, DEFAULT_CLASSIFIER_TRAIN_FRACTION,
};
use crate::net::{
    generate_weight_set_with_progress, Activation, Architecture, NetSpec, TrainConfig,
    TrainedWeights,
};
use crate::seed;
use crate::tasks::{
    load_idx, partition_with_split, synth_gaussian_dataset, Dataset, TaskSuite,
    DEFAULT_TRAIN_FRACTION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Gaussian blobs; `num_classes` defaults to exactly what the tasks need.
    Blobs {
        feature_dim: usize,
        per_class: usize,
        spread: f64,
        #[serde(default)]
        num_classes: Option<usize>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Classification,
    Retrieval,
    Both,
}

impl Protocol {
    fn includes(self, p: Protocol) -> bool {
        self == Protocol::Both || self == p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisConfig {
    /// Significance level; accepted when every in-scope error is below it.
    pub alpha: f64,
    pub dataset: DatasetSource,
    pub classes_per_task: usize,
    /// M: tasks whose runs train and test the classifiers.
    pub seen_tasks: usize,
    /// M': tasks held out for retrieval.
    pub unseen_tasks: usize,
    /// Per-class share of samples used to train each network.
    pub data_train_fraction: f64,
    pub spec: NetSpec,
    pub train: TrainConfig,
    /// N: training runs per task.
    pub runs_per_task: usize,
    pub classifier: ClassifierConfig,
    /// Share of each seen task's runs used to train the classifiers.
    pub classifier_train_fraction: f64,
    /// Share of each unseen task's runs used as retrieval queries.
    pub query_fraction: f64,
    /// Use every unseen run as both query and gallery.
    pub self_gallery: bool,
    pub retrieval_k: usize,
    pub protocol: Protocol,
    /// Chain features when true, raw layers otherwise.
    pub normalize: bool,
    pub master_seed: u64,
}

impl HypothesisConfig {
    /// Desk-scale blobs study: 10 seen and 4 unseen tasks of 4 classes, MLP-3, 20 runs each.
    pub fn desk_scale() -> Self {
        HypothesisConfig {
            alpha: 0.05,
            dataset: DatasetSource::Blobs {
                feature_dim: 16,
                per_class: 60,
                spread: 1.0,
                num_classes: None,
            },
            classes_per_task: 4,
            seen_tasks: 10,
            unseen_tasks: 4,
            data_train_fraction: DEFAULT_TRAIN_FRACTION,
            spec: NetSpec::mlp(&[16, 16, 16, 4], Activation::Relu),
            train: TrainConfig::with_default_decay(30, 16, 0.05, 0.9).with_weight_decay(5e-3),
            runs_per_task: 20,
            classifier: ClassifierConfig::default(),
            classifier_train_fraction: DEFAULT_CLASSIFIER_TRAIN_FRACTION,
            query_fraction: 0.2,
            self_gallery: false,
            retrieval_k: 10,
            protocol: Protocol::Classification,
            normalize: true,
            master_seed: 2021,
        }
    }

    /// Cross-network study: MLP-4 on wider blobs, where skip connections
    /// visibly reshape the learned weights.
    pub fn cross_desk_scale() -> Self {
        HypothesisConfig {
            dataset: DatasetSource::Blobs {
                feature_dim: 16,
                per_class: 60,
                spread: 2.0,
                num_classes: None,
            },
            spec: NetSpec::mlp(&[16, 16, 16, 16, 4], Activation::Relu),
            ..Self::desk_scale()
        }
    }

    pub fn total_tasks(&self) -> usize {
        self.seen_tasks + self.unseen_tasks
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        if self.seen_tasks < 2 && self.protocol.includes(Protocol::Classification) {
            return Err(Error::Config(
                "classification needs at least two seen tasks".into(),
            ));
        }
        if self.seen_tasks == 0 {
            return Err(Error::Config("at least one seen task is required".into()));
        }
        if self.protocol.includes(Protocol::Retrieval) && self.unseen_tasks == 0 {
            return Err(Error::Config(
                "the retrieval protocol needs unseen tasks".into(),
            ));
        }
        if self.runs_per_task < 2 {
            return Err(Error::Config("runs_per_task must be at least 2".into()));
        }
        if self.spec.depth() < 2 {
            return Err(Error::Config(
                "the hypothesis test needs networks with L >= 2".into(),
            ));
        }
        for (name, f) in [
            ("classifier_train_fraction", self.classifier_train_fraction),
            ("query_fraction", self.query_fraction),
            ("data_train_fraction", self.data_train_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) && !(name == "data_train_fraction" && f == 1.0) {
                return Err(Error::Config(format!("{name} {f} outside (0, 1)")));
            }
        }
        if self.retrieval_k == 0 {
            return Err(Error::Config("retrieval_k must be at least 1".into()));
        }
        if let DatasetSource::Blobs {
            num_classes: Some(n),
            ..
        } = self.dataset
        {
            if n < self.total_tasks() * self.classes_per_task {
                return Err(Error::Config(format!(
                    "{n} blob classes cannot hold {} tasks of {} classes",
                    self.total_tasks(),
                    self.classes_per_task
                )));
            }
        }
        self.spec.validate()?;
        self.train.validate()?;
        if self.classes_per_task > self.spec.num_outputs() {
            return Err(Error::Config(format!(
                "{} classes per task but the network has {} outputs",
                self.classes_per_task,
                self.spec.num_outputs()
            )));
        }
        Ok(())
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Blobs {
                feature_dim,
                per_class,
                spread,
                num_classes,
            } => synth_gaussian_dataset(
                num_classes.unwrap_or(self.total_tasks() * self.classes_per_task),
                *feature_dim,
                *per_class,
                *spread,
                seed::stage_seed(self.master_seed, "dataset"),
            ),
            DatasetSource::Idx { images, labels } => {
                for p in [images, labels] {
                    if !p.exists() {
                        return Err(Error::Config(format!(
                            "dataset file {} does not exist",
                            p.display()
                        )));
                    }
                }
                load_idx(images, labels)
            }
        }
    }

    pub fn build_suite(&self, d: &Dataset) -> Result<TaskSuite> {
        if d.feature_dim != self.spec.input_len() {
            return Err(Error::Config(format!(
                "dataset has {} features but the network takes {}",
                d.feature_dim,
                self.spec.input_len()
            )));
        }
        partition_with_split(
            d,
            self.classes_per_task,
            self.total_tasks(),
            seed::stage_seed(self.master_seed, "tasks"),
            self.data_train_fraction,
        )
    }

    fn seen_ids(&self) -> Vec<usize> {
        (0..self.seen_tasks).collect()
    }

    fn unseen_ids(&self) -> Vec<usize> {
        (self.seen_tasks..self.total_tasks()).collect()
    }
}

/// Generates the full weight population (seen and unseen tasks) for `cfg`.
pub fn generate_population(cfg: &HypothesisConfig) -> Result<WeightSet> {
    generate_population_with_progress(cfg, |_, _| {})
}

pub fn generate_population_with_progress<F>(cfg: &HypothesisConfig, on_run: F) -> Result<WeightSet>
where
    F: Fn(usize, usize) + Sync,
{
    cfg.validate()?;
    let dataset = cfg.build_dataset().map_err(|e| e.in_stage("dataset"))?;
    let suite = cfg.build_suite(&dataset).map_err(|e| e.in_stage("tasks"))?;
    generate_weight_set_with_progress(
        &dataset,
        &suite,
        &cfg.spec,
        &cfg.train,
        cfg.runs_per_task,
        cfg.master_seed,
        on_run,
    )
    .map_err(|e| e.in_stage("generate"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainError {
    pub chain: usize,
    pub protocol: Protocol,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub alpha: f64,
    pub per_chain_errors: Vec<ChainError>,
    pub accepted: bool,
    pub baseline_errors: Vec<ChainError>,
}

impl Verdict {
    pub fn new(
        alpha: f64,
        per_chain_errors: Vec<ChainError>,
        baseline_errors: Vec<ChainError>,
    ) -> Self {
        let accepted = per_chain_errors.iter().all(|e| e.error < alpha);
        Verdict {
            alpha,
            per_chain_errors,
            accepted,
            baseline_errors,
        }
    }

    pub fn max_error(&self) -> f64 {
        self.per_chain_errors
            .iter()
            .map(|e| e.error)
            .fold(0.0, f64::max)
    }

    /// Per-chain verdicts: `(chain, protocol, accepted)`.
    pub fn per_chain(&self) -> Vec<(usize, Protocol, bool)> {
        self.per_chain_errors
            .iter()
            .map(|e| (e.chain, e.protocol, e.error < self.alpha))
            .collect()
    }
}

/// Accuracies of one chain depth, for both feature modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainAccuracy {
    pub chain: usize,
    pub normalized_train: f64,
    pub normalized_test: f64,
    pub unnormalized_train: f64,
    pub unnormalized_test: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainRetrieval {
    pub chain: usize,
    pub normalized: RetrievalResult,
    pub unnormalized: RetrievalResult,
}

/// Everything one hypothesis test produced.
#[derive(Clone, Debug)]
pub struct HypothesisRun {
    pub weights: WeightSet,
    /// Seen-task runs with the classifier split applied.
    pub seen: WeightSet,
    pub normalized: Vec<ChainClassifier>,
    pub unnormalized: Vec<ChainClassifier>,
    pub classification: Vec<ChainAccuracy>,
    pub retrieval: Vec<ChainRetrieval>,
    pub verdict: Verdict,
}

fn classifier_cfg(cfg: &HypothesisConfig, l: usize) -> ClassifierConfig {
    ClassifierConfig {
        seed: seed::mix(
            seed::stage_seed(cfg.master_seed, "classifier") ^ cfg.classifier.seed ^ l as u64,
        ),
        ..cfg.classifier.clone()
    }
}

/// Trains the `L` chain classifiers of one feature mode on `seen`'s train split.
pub fn train_classifiers(
    cfg: &HypothesisConfig,
    seen: &WeightSet,
    mode: FeatureMode,
) -> Result<Vec<ChainClassifier>> {
    let depth = seen.spec.depth();
    (1..=depth)
        .into_par_iter()
        .map(|l| train_chain_classifier(seen, l, mode, &classifier_cfg(cfg, l)))
        .collect()
}

/// Queries and gallery of the unseen tasks.
pub fn retrieval_split<'a>(
    cfg: &HypothesisConfig,
    unseen: &'a WeightSet,
) -> (Vec<&'a TrainedWeights>, Vec<&'a TrainedWeights>) {
    if cfg.self_gallery {
        let all: Vec<&TrainedWeights> = unseen.entries.iter().collect();
        return (all.clone(), all);
    }
    let n_query = ((cfg.runs_per_task as f64 * cfg.query_fraction).round() as usize)
        .clamp(1, cfg.runs_per_task - 1);
    unseen.entries.iter().partition(|w| w.run_index < n_query)
}

/// Trains and tests on an existing weight population.
pub fn evaluate_population(cfg: &HypothesisConfig, weights: WeightSet) -> Result<HypothesisRun> {
    cfg.validate()?;
    let mut seen = weights.filter_tasks(&cfg.seen_ids());
    seen.resplit(cfg.classifier_train_fraction);
    if seen.split.test.is_empty() {
        return Err(Error::Data("no held-out runs for the seen tasks".into()));
    }
    let unseen = weights.filter_tasks(&cfg.unseen_ids());

    let normalized =
        train_classifiers(cfg, &seen, FeatureMode::Chain).map_err(|e| e.in_stage("train"))?;
    let unnormalized =
        train_classifiers(cfg, &seen, FeatureMode::RawLayer).map_err(|e| e.in_stage("train"))?;

    let train_split = seen.train_entries();
    let test_split = seen.test_entries();
    let classification = normalized
        .iter()
        .zip(&unnormalized)
        .map(|(n, u)| {
            Ok(ChainAccuracy {
                chain: n.chain_depth,
                normalized_train: accuracy(n, &train_split)?,
                normalized_test: accuracy(n, &test_split)?,
                unnormalized_train: accuracy(u, &train_split)?,
                unnormalized_test: accuracy(u, &test_split)?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("classification"))?;

    let retrieval = if unseen.is_empty() {
        Vec::new()
    } else {
        let (queries, gallery) = retrieval_split(cfg, &unseen);
        normalized
            .iter()
            .zip(&unnormalized)
            .map(|(n, u)| {
                Ok(ChainRetrieval {
                    chain: n.chain_depth,
                    normalized: retrieve(n, &queries, &gallery, cfg.retrieval_k)?,
                    unnormalized: retrieve(u, &queries, &gallery, cfg.retrieval_k)?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("retrieval"))?
    };

    let verdict = verdict_from(cfg, &classification, &retrieval);
    Ok(HypothesisRun {
        weights,
        seen,
        normalized,
        unnormalized,
        classification,
        retrieval,
        verdict,
    })
}

fn verdict_from(
    cfg: &HypothesisConfig,
    classification: &[ChainAccuracy],
    retrieval: &[ChainRetrieval],
) -> Verdict {
    let mut normalized = Vec::new();
    let mut raw = Vec::new();
    if cfg.protocol.includes(Protocol::Classification) {
        for a in classification {
            normalized.push(ChainError {
                chain: a.chain,
                protocol: Protocol::Classification,
                error: 1.0 - a.normalized_test,
            });
            raw.push(ChainError {
                chain: a.chain,
                protocol: Protocol::Classification,
                error: 1.0 - a.unnormalized_test,
            });
        }
    }
    if cfg.protocol.includes(Protocol::Retrieval) {
        for r in retrieval {
            normalized.push(ChainError {
                chain: r.chain,
                protocol: Protocol::Retrieval,
                error: 1.0 - r.normalized.rank1(),
            });
            raw.push(ChainError {
                chain: r.chain,
                protocol: Protocol::Retrieval,
                error: 1.0 - r.unnormalized.rank1(),
            });
        }
    }
    if cfg.normalize {
        Verdict::new(cfg.alpha, normalized, raw)
    } else {
        Verdict::new(cfg.alpha, raw.clone(), raw)
    }
}

/// Generate, normalize, train and test; the whole procedure.
pub fn run_hypothesis_test(cfg: &HypothesisConfig) -> Result<HypothesisRun> {
    let weights = generate_population(cfg)?;
    evaluate_population(cfg, weights)
}

/// Deeper, residual and leaky-ReLU versions of an MLP spec.
pub fn standard_variants(base: &NetSpec) -> Vec<(String, NetSpec)> {
    let mut out = Vec::new();
    if let Architecture::Mlp { widths } = &base.arch {
        let mut deeper = widths.clone();
        let hidden = widths[widths.len() - 2];
        deeper.insert(widths.len() - 1, hidden);
        out.push((
            "depth".to_string(),
            NetSpec {
                arch: Architecture::Mlp { widths: deeper },
                ..base.clone()
            },
        ));
        out.push(("residual".to_string(), base.clone().with_residual(true)));
    }
    out.push((
        "leaky".to_string(),
        NetSpec {
            activation: Activation::LeakyRelu { slope: 0.01 },
            ..base.clone()
        },
    ));
    out
}

#[derive(Debug)]
pub struct VariantOutcome {
    pub name: String,
    pub spec: NetSpec,
    pub result: Result<HypothesisRun>,
}

/// One full hypothesis test per variant on the base config's tasks. A failing
/// variant is reported and the others still run.
pub fn run_variant_study(
    base: &HypothesisConfig,
    variants: &[(String, NetSpec)],
) -> Vec<VariantOutcome> {
    variants
        .iter()
        .map(|(name, spec)| {
            let cfg = HypothesisConfig {
                spec: spec.clone(),
                ..base.clone()
            };
            VariantOutcome {
                name: name.clone(),
                spec: spec.clone(),
                result: run_hypothesis_test(&cfg),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossChain {
    pub chain: usize,
    /// Net-A classifiers on net-B held-out runs of the seen tasks.
    pub classification: f64,
    /// Net-A classifiers ranking net-B runs of the unseen tasks (rank-1).
    pub retrieval_rank1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CrossReport {
    pub chains: Vec<CrossChain>,
    pub a: WeightSet,
    pub b: WeightSet,
}

impl CrossReport {
    pub fn mean_classification(&self) -> f64 {
        self.chains.iter().map(|c| c.classification).sum::<f64>() / self.chains.len().max(1) as f64
    }
}

/// Classifiers trained on net A's weights, tested on net B's weights of the
/// same tasks. Chains up to the shallower depth are compared; their feature
/// dims must match.
pub fn run_cross_network(a: &NetSpec, b: &NetSpec, cfg: &HypothesisConfig) -> Result<CrossReport> {
    let cfg_a = HypothesisConfig {
        spec: a.clone(),
        ..cfg.clone()
    };
    let cfg_b = HypothesisConfig {
        spec: b.clone(),
        ..cfg.clone()
    };
    let wa = generate_population(&cfg_a)?;
    let wb = if a == b {
        wa.clone()
    } else {
        generate_population(&cfg_b)?
    };
    cross_from_populations(cfg, wa, wb)
}

pub fn cross_from_populations(
    cfg: &HypothesisConfig,
    wa: WeightSet,
    wb: WeightSet,
) -> Result<CrossReport> {
    let depth = wa.spec.depth().min(wb.spec.depth());
    let (ka, kb) = (wa.spec.kernel(), wb.spec.kernel());
    if wa.spec.widths()[0] != wb.spec.widths()[0] || ka != kb {
        return Err(Error::Protocol(format!(
            "chain features of {:?} and {:?} have different dims",
            wa.spec.arch, wb.spec.arch
        )));
    }
    let mut seen_a = wa.filter_tasks(&cfg.seen_ids());
    seen_a.resplit(cfg.classifier_train_fraction);
    let mut seen_b = wb.filter_tasks(&cfg.seen_ids());
    seen_b.resplit(cfg.classifier_train_fraction);
    let unseen_b = wb.filter_tasks(&cfg.unseen_ids());

    let classifiers: Vec<ChainClassifier> = (1..=depth)
        .into_par_iter()
        .map(|l| train_chain_classifier(&seen_a, l, FeatureMode::Chain, &classifier_cfg(cfg, l)))
        .collect::<Result<_>>()?;
    let test_b = seen_b.test_entries();
    let (queries, gallery) = retrieval_split(cfg, &unseen_b);
    let chains = classifiers
        .iter()
        .map(|c| {
            let retrieval_rank1 = if unseen_b.is_empty() {
                None
            } else {
                Some(retrieve(c, &queries, &gallery, cfg.retrieval_k)?.rank1())
            };
            Ok(CrossChain {
                chain: c.chain_depth,
                classification: accuracy(c, &test_b)?,
                retrieval_rank1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossReport {
        chains,
        a: wa,
        b: wb,
    })
}
