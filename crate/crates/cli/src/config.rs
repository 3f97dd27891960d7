//! Experiment configuration: a TOML document with `dataset`, `model`, `loss`,
//! `train`, `eval` and `output` sections plus a top-level `seed`.
//!
//! Every key has a default, so an empty document is a complete experiment:
//! the 6-class separable Gaussian mixture trained with the paper's loss
//! weights (`s = 10`, `λ = 1`, `η₁ = η₂ = 1`) and Adam at `1e-3`, batch 512.
//! Unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use orca_core::datasets::LabelColumn;
use orca_core::eval::{EvalConfig, NmiNormalization, DEFAULT_HEAD_COUNT_THRESHOLD};
use orca_core::objective::{LossConfig, MarginMode, Prior, DEFAULT_FIXED_MARGIN};
use orca_core::{ModelConfig, OptimizerConfig, SplitConfig, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives data generation, the split, model init and batch order.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Synthetic isotropic Gaussian mixture.
    Gaussian,
    /// Tabular CSV with one label column.
    Csv,
    /// A dataset container written by `orca generate` (already split).
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Minimum distance between class means, in units of `cluster_std`.
    pub separation: f64,
    pub cluster_std: f64,
    /// Input file for the `csv` and `file` sources.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// CSV label column, by header name or 0-based index.
    pub label_column: LabelColumn,
    pub has_header: bool,
    /// Z-score every feature column before splitting.
    pub standardize: bool,
    /// Largest-to-smallest class size ratio; 1 disables subsampling.
    pub imbalance_ratio: f64,
    pub seen_class_fraction: f64,
    pub labeled_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DatasetSource::Gaussian,
            num_classes: 6,
            dim: 2,
            per_class: 200,
            separation: 8.0,
            cluster_std: 1.0,
            path: None,
            label_column: LabelColumn::Name("label".into()),
            has_header: true,
            standardize: false,
            imbalance_ratio: 1.0,
            seen_class_fraction: 0.5,
            labeled_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Heads beyond the seen ones; defaults to the dataset's novel-class count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra_head_capacity: Option<usize>,
    pub dropout_rate: f64,
    pub frozen_layers: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dims: vec![256],
            embed_dim: 64,
            extra_head_capacity: None,
            dropout_rate: 0.0,
            frozen_layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginKind {
    Adaptive,
    Fixed,
    Zero,
}

/// `prior = "uniform"` or an explicit probability list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSpec {
    Named(String),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub margin_mode: MarginKind,
    /// Used when `margin_mode = "fixed"`.
    pub fixed_margin: f64,
    pub supervised_weight: f64,
    pub lambda: f64,
    pub s: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub prior: PriorSpec,
    pub pair_eps: f64,
    pub scale_pair_probs: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let core = LossConfig::default();
        Self {
            margin_mode: MarginKind::Adaptive,
            fixed_margin: DEFAULT_FIXED_MARGIN,
            supervised_weight: core.supervised_weight,
            lambda: core.lambda,
            s: core.s,
            eta1: core.eta1,
            eta2: core.eta2,
            prior: PriorSpec::Named("uniform".into()),
            pair_eps: core.pair_eps,
            scale_pair_probs: core.scale_pair_probs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Defaults to 0 for Adam and 5e-4 for SGD.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// 0-based epochs at which the learning rate is divided by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let core = TrainConfig::default();
        Self {
            epochs: core.epochs,
            batch_size: core.batch_size,
            optimizer: OptimizerKind::Adam,
            lr: core.base_lr,
            weight_decay: None,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: core.lr_decay_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Fraction of evaluated rows a novel head needs to count as active.
    pub head_count_threshold: f64,
    pub nmi: NmiNormalization,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            head_count_threshold: DEFAULT_HEAD_COUNT_THRESHOLD,
            nmi: NmiNormalization::Arithmetic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricsFormat {
    #[default]
    Jsonl,
    Csv,
}

impl MetricsFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MetricsFormat::Jsonl => "jsonl",
            MetricsFormat::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub format: MetricsFormat,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            format: MetricsFormat::Jsonl,
        }
    }
}

/// A `--set KEY=VALUE` override.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    /// Parses `section.key=value`. The value is read as a TOML literal and
    /// falls back to a bare string, so `--set dataset.source=csv` works unquoted.
    pub fn parse(spec: &str) -> CliResult<Self> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not KEY=VALUE")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(CliError::Usage(format!("override `{spec}` has an empty key")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        Ok(Self { key: key.to_string(), value })
    }

    pub fn render(&self) -> String {
        format!("{}={}", self.key, self.value)
    }

    fn apply(&self, root: &mut toml::Table) -> CliResult<()> {
        let parts: Vec<&str> = self.key.split('.').collect();
        let (last, sections) = parts.split_last().expect("non-empty key");
        let mut table = root;
        for part in sections {
            let entry = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry.as_table_mut().ok_or_else(|| {
                CliError::Usage(format!("override `{}`: `{part}` is not a section", self.key))
            })?;
        }
        table.insert(last.to_string(), self.value.clone());
        Ok(())
    }
}

/// Parses a config document with no overrides.
pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    parse_config_with(text, &[])
}

/// Parses a config document, applies overrides in order, fills defaults and validates.
pub fn parse_config_with(text: &str, overrides: &[Override]) -> CliResult<ExperimentConfig> {
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))?;
    for o in overrides {
        o.apply(&mut table)?;
    }
    let mut cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
    cfg.resolve_defaults();
    cfg.validate()?;
    Ok(cfg)
}

fn section_error(section: &str, err: orca_core::Error) -> CliError {
    CliError::Usage(format!("{section}: {err}"))
}

impl ExperimentConfig {
    /// Replaces optimizer-dependent defaults with concrete values.
    fn resolve_defaults(&mut self) {
        if self.train.weight_decay.is_none() {
            self.train.weight_decay = Some(match self.train.optimizer {
                OptimizerKind::Adam => 0.0,
                OptimizerKind::Sgd => 5e-4,
            });
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.dataset;
        match d.source {
            DatasetSource::Gaussian => {
                if d.num_classes < 2 {
                    return Err(CliError::Usage("dataset.num_classes must be at least 2".into()));
                }
                if d.dim == 0 {
                    return Err(CliError::Usage("dataset.dim must be at least 1".into()));
                }
                if d.per_class == 0 {
                    return Err(CliError::Usage("dataset.per_class must be at least 1".into()));
                }
                if !(d.separation >= 0.0) || !d.separation.is_finite() {
                    return Err(CliError::Usage("dataset.separation must be finite and >= 0".into()));
                }
                if !(d.cluster_std > 0.0) || !d.cluster_std.is_finite() {
                    return Err(CliError::Usage("dataset.cluster_std must be > 0".into()));
                }
            }
            DatasetSource::Csv | DatasetSource::File => {
                if d.path.is_none() {
                    return Err(CliError::Usage(format!(
                        "dataset.path is required when dataset.source = \"{}\"",
                        if d.source == DatasetSource::Csv { "csv" } else { "file" }
                    )));
                }
            }
        }
        if !(d.imbalance_ratio >= 1.0) || !d.imbalance_ratio.is_finite() {
            return Err(CliError::Usage(format!(
                "dataset.imbalance_ratio must be >= 1, got {}",
                d.imbalance_ratio
            )));
        }
        self.split_config().validate().map_err(|e| section_error("dataset", e))?;

        let m = &self.model;
        if m.embed_dim == 0 {
            return Err(CliError::Usage("model.embed_dim must be at least 1".into()));
        }
        if m.hidden_dims.contains(&0) {
            return Err(CliError::Usage("model.hidden_dims entries must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&m.dropout_rate) {
            return Err(CliError::Usage(format!(
                "model.dropout_rate must lie in [0, 1), got {}",
                m.dropout_rate
            )));
        }

        self.loss_config()?.validate().map_err(|e| section_error("loss", e))?;
        self.train_config().validate().map_err(|e| section_error("train", e))?;

        let t = self.eval.head_count_threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Usage(format!(
                "eval.head_count_threshold must lie in [0, 1], got {t}"
            )));
        }
        Ok(())
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            seen_class_fraction: self.dataset.seen_class_fraction,
            labeled_fraction: self.dataset.labeled_fraction,
            seed: self.seed,
        }
    }

    pub fn loss_config(&self) -> CliResult<LossConfig> {
        let l = &self.loss;
        let prior = match &l.prior {
            PriorSpec::Named(name) if name == "uniform" => Prior::Uniform,
            PriorSpec::Named(other) => {
                return Err(CliError::Usage(format!(
                    "loss.prior must be \"uniform\" or a list of probabilities, got \"{other}\""
                )))
            }
            PriorSpec::Explicit(p) => Prior::Explicit(p.clone()),
        };
        Ok(LossConfig {
            margin_mode: match l.margin_mode {
                MarginKind::Adaptive => MarginMode::Adaptive,
                MarginKind::Fixed => MarginMode::Fixed(l.fixed_margin),
                MarginKind::Zero => MarginMode::Zero,
            },
            supervised_weight: l.supervised_weight,
            lambda: l.lambda,
            s: l.s,
            eta1: l.eta1,
            eta2: l.eta2,
            prior,
            pair_eps: l.pair_eps,
            scale_pair_probs: l.scale_pair_probs,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let optimizer = match t.optimizer {
            OptimizerKind::Adam => OptimizerConfig::Adam {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
                weight_decay: t.weight_decay.unwrap_or(0.0),
            },
            OptimizerKind::Sgd => OptimizerConfig::SgdMomentum {
                momentum: t.momentum,
                weight_decay: t.weight_decay.unwrap_or(5e-4),
            },
        };
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer,
            base_lr: t.lr,
            lr_decay_epochs: t.lr_decay_epochs.clone(),
            lr_decay_factor: t.lr_decay_factor,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            head_count_threshold: self.eval.head_count_threshold,
            nmi_normalization: self.eval.nmi,
        }
    }

    /// Model shape for a dataset with the given feature and class counts.
    pub fn model_config(&self, input_dim: usize, num_seen: usize, num_novel: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            embed_dim: self.model.embed_dim,
            num_seen_heads: num_seen,
            extra_head_capacity: self.model.extra_head_capacity.unwrap_or(num_novel),
            dropout_rate: self.model.dropout_rate,
            frozen_layers: self.model.frozen_layers.clone(),
        }
    }

    /// The resolved snapshot: every key spelled out, overrides listed as comments.
    pub fn to_resolved_toml(&self, overrides: &[Override]) -> CliResult<String> {
        let body = toml::to_string(self)
            .map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))?;
        let mut out = String::from("# resolved experiment config\n");
        for o in overrides {
            out.push_str(&format!("# override: {}\n", o.render()));
        }
        out.push('\n');
        out.push_str(&body);
        Ok(out)
    }
}
