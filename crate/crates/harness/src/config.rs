//! Flat TOML experiment configuration.
//!
//! Every key is optional except `dataset`; unknown keys are rejected.
//! Defaults describe the desk-scale tiny-transformer setup.

use std::path::{Path, PathBuf};

use isp_core::data::{gen_gaussian_clusters, gen_sequence_task, load_csv, SplitFractions};
use isp_core::prune::{
    DenoiserConfig, ImpConfig, ProgressiveConfig, PruneSchedule, Rewind, RunSettings,
};
use isp_core::soup::{SelectMetric, SoupConfig};
use isp_core::train::PretrainConfig;
use isp_core::{Dataset, ModelKind, ModelSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Sequence,
    Gaussian,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Isp,
    Imp,
    ImpRewind,
    Oneshot,
    Random,
    Progressive,
    Snip,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Isp,
        Method::Imp,
        Method::ImpRewind,
        Method::Oneshot,
        Method::Random,
        Method::Progressive,
        Method::Snip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Isp => "isp",
            Method::Imp => "imp",
            Method::ImpRewind => "imp-rewind",
            Method::Oneshot => "oneshot",
            Method::Random => "random",
            Method::Progressive => "progressive",
            Method::Snip => "snip",
        }
    }

    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Self::ALL.iter().map(|m| m.as_str()).collect();
                HarnessError::Config(format!(
                    "unknown method `{s}`; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    DenoiserCount,
    LookAhead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // model
    pub model: ModelKind,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,

    // dataset
    pub dataset: Option<DatasetKind>,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    /// Sequence task: total samples. Gaussian task: samples per class.
    pub samples: usize,
    pub dim: usize,
    pub separation: f64,
    pub data_path: Option<PathBuf>,
    pub val_fraction: f64,
    pub test_fraction: f64,

    // pretraining
    pub pretrain_epochs: u64,
    pub pretrain_lr: f64,
    pub checkpoint: Option<PathBuf>,

    // pruning run
    pub lr: f64,
    /// Epochs of the pruning budget; `T = round(epochs · steps_per_epoch)`.
    pub epochs: f64,
    pub compression_rate: f64,
    pub look_ahead: u64,
    pub weight_decay: f64,
    pub denoiser_count: usize,
    pub target_sparsity: f64,
    pub batch_size: usize,
    pub seed_steps: Option<u64>,
    pub mask_budget: Option<u64>,
    pub subset_fraction: f64,
    pub fresh_lookahead_optimizer: bool,
    pub imp_rounds: usize,
    pub imp_rewind_step: u64,
    pub progressive_intervals: usize,
    pub progressive_rate: Option<f64>,

    // soup
    pub soup_count: usize,
    pub soup_steps: u64,
    pub soup_metric: SelectMetric,

    // mask comparison
    pub compare_methods: Vec<String>,
    pub compare_sparsities: Vec<f64>,
    /// Per-round steps of the IMP masks used in comparisons.
    pub compare_round_steps: u64,

    // harness
    pub seed: u64,
    pub method: Option<Method>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::TinyTransformer,
            width: 8,
            depth: 2,
            heads: 2,
            dataset: None,
            vocab: 48,
            seq_len: 8,
            classes: 24,
            samples: 4000,
            dim: 16,
            separation: 3.0,
            data_path: None,
            val_fraction: 0.15,
            test_fraction: 0.15,
            pretrain_epochs: 15,
            pretrain_lr: 0.01,
            checkpoint: None,
            lr: 5e-4,
            epochs: 9.0,
            compression_rate: 0.15,
            look_ahead: 20,
            weight_decay: 0.01,
            denoiser_count: 4,
            target_sparsity: 0.5,
            batch_size: 32,
            seed_steps: None,
            mask_budget: None,
            subset_fraction: 0.1,
            fresh_lookahead_optimizer: true,
            imp_rounds: 5,
            imp_rewind_step: 0,
            progressive_intervals: 5,
            progressive_rate: None,
            soup_count: 5,
            soup_steps: 100,
            soup_metric: SelectMetric::Accuracy,
            compare_methods: vec!["oneshot".into(), "imp".into()],
            compare_sparsities: vec![0.1, 0.2, 0.3],
            compare_round_steps: 200,
            seed: 0,
            method: None,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let field = |name: &str, why: &str| Err(HarnessError::Config(format!("`{name}`: {why}")));
        let Some(dataset) = self.dataset else {
            return field(
                "dataset",
                "missing dataset spec (sequence, gaussian or csv)",
            );
        };
        if dataset == DatasetKind::Csv && self.data_path.is_none() {
            return field("data_path", "required for the csv dataset");
        }
        match (dataset, self.model) {
            (DatasetKind::Sequence, ModelKind::Mlp) => {
                return field(
                    "model",
                    "the sequence task needs the tiny-transformer model",
                )
            }
            (DatasetKind::Gaussian | DatasetKind::Csv, ModelKind::TinyTransformer) => {
                return field("model", "dense feature datasets need the mlp model")
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be positive");
        }
        if !(self.compression_rate > 0.0 && self.compression_rate < 1.0) {
            return field("compression_rate", "must lie in (0, 1)");
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return field("target_sparsity", "must lie in (0, 1)");
        }
        if !(self.epochs >= 0.0 && self.epochs.is_finite()) {
            return field("epochs", "must be a non-negative number");
        }
        if self.lr.is_nan()
            || self.lr <= 0.0
            || self.pretrain_lr.is_nan()
            || self.pretrain_lr <= 0.0
        {
            return field("lr", "learning rates must be positive");
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return field("subset_fraction", "must lie in (0, 1]");
        }
        if self
            .compare_sparsities
            .iter()
            .any(|s| !(*s > 0.0 && *s < 1.0))
        {
            return field("compare_sparsities", "every value must lie in (0, 1)");
        }
        for m in &self.compare_methods {
            Method::parse(m)?;
        }
        self.model_spec()
            .validate()
            .map_err(|e| HarnessError::Config(format!("model: {e}")))?;
        Ok(())
    }

    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            val: self.val_fraction,
            test: self.test_fraction,
        }
    }

    pub fn dataset(&self) -> Result<Dataset, HarnessError> {
        let fr = self.fractions();
        let data = match self.dataset {
            Some(DatasetKind::Sequence) => gen_sequence_task(
                self.vocab,
                self.seq_len,
                self.classes,
                self.samples,
                self.seed,
                fr,
            ),
            Some(DatasetKind::Gaussian) => gen_gaussian_clusters(
                self.classes,
                self.dim,
                self.separation,
                self.samples,
                self.seed,
                fr,
            ),
            Some(DatasetKind::Csv) => {
                let path = self
                    .data_path
                    .as_deref()
                    .ok_or_else(|| HarnessError::Config("`data_path`: missing".into()))?;
                load_csv(path, self.seed, fr)
            }
            None => {
                return Err(HarnessError::Config(
                    "`dataset`: missing dataset spec".into(),
                ))
            }
        };
        data.map_err(|e| HarnessError::Config(format!("dataset: {e}")))
    }

    pub fn model_spec(&self) -> ModelSpec {
        match self.model {
            ModelKind::Mlp => ModelSpec::mlp(self.dim, self.width, self.depth, self.classes),
            ModelKind::TinyTransformer => ModelSpec::transformer(
                self.vocab,
                self.seq_len,
                self.width,
                self.heads,
                self.depth,
                self.classes,
            ),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    /// Total pruning budget `T` in optimizer steps.
    pub fn total_steps(&self, data: &Dataset) -> u64 {
        (self.epochs * data.steps_per_epoch(self.batch_size) as f64).round() as u64
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn schedule(&self, data: &Dataset) -> PruneSchedule {
        let total = self.total_steps(data);
        PruneSchedule {
            seed_steps: self
                .seed_steps
                .unwrap_or_else(|| data.seed_steps(self.batch_size)),
            rate: self.compression_rate,
            target: self.target_sparsity,
            mask_budget: self.mask_budget.unwrap_or(total),
            total,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        let mut d = DenoiserConfig::new(self.denoiser_count, self.look_ahead, self.seed);
        d.subset_fraction = self.subset_fraction;
        d.fresh_optimizer = self.fresh_lookahead_optimizer;
        d
    }

    pub fn imp(&self, data: &Dataset, rewind: bool) -> ImpConfig {
        ImpConfig {
            rounds: self.imp_rounds,
            per_round_budget: self.total_steps(data),
            rate: self.compression_rate,
            target: self.target_sparsity,
            rewind: if rewind && self.imp_rewind_step > 0 {
                Rewind::Step(self.imp_rewind_step)
            } else {
                Rewind::Init
            },
        }
    }

    pub fn progressive(&self, data: &Dataset) -> ProgressiveConfig {
        ProgressiveConfig {
            intervals: self.progressive_intervals,
            rate: self.progressive_rate,
            target: self.target_sparsity,
            total: self.total_steps(data),
        }
    }

    pub fn soup(&self) -> SoupConfig {
        let mut s = SoupConfig::new(self.soup_count, self.soup_steps, self.lr, self.seed);
        s.subset_fraction = self.subset_fraction;
        s.metric = self.soup_metric;
        s
    }

    /// Hex SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let canonical = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}
