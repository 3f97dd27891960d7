//! Subcommand implementations. Each returns its results in memory; the
//! `write` methods put them on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use orca_core::datasets::{
    apply_exponential_imbalance, apply_open_world_split, generate_gaussian_mixture,
    load_dataset, load_tabular_csv, save_dataset, standardize_features,
};
use orca_core::trainer::{evaluate, fit};
use orca_core::{EpochLog, EvalReport, Matrix, Model, OpenWorldDataset, Rng};

use crate::config::{
    parse_config_with, DatasetSource, ExperimentConfig, MarginKind, MetricsFormat, Override,
};
use crate::error::{CliError, CliResult};
use crate::metrics::{emit_metrics, format_sig6, EPOCH_LOG_SCHEMA_VERSION};

/// RNG stream for the mixture generator.
pub const GENERATOR_STREAM: u64 = 0;
/// RNG stream for imbalance subsampling.
pub const IMBALANCE_STREAM: u64 = 2;
/// RNG stream for model initialization.
pub const INIT_STREAM: u64 = 3;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const DATASET_FILE: &str = "dataset.owds";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";

/// Builds the dataset described by the config's `dataset` section.
pub fn build_dataset(cfg: &ExperimentConfig) -> CliResult<OpenWorldDataset> {
    let d = &cfg.dataset;
    let (mut features, mut labels): (Matrix, Vec<usize>) = match d.source {
        DatasetSource::File => {
            let path = d.path.as_ref().expect("validated");
            return load_dataset(path).map_err(|e| with_path(path, e));
        }
        DatasetSource::Gaussian => generate_gaussian_mixture(
            d.num_classes,
            d.dim,
            d.per_class,
            d.separation,
            d.cluster_std,
            &mut Rng::with_stream(cfg.seed, GENERATOR_STREAM),
        )?,
        DatasetSource::Csv => {
            let path = d.path.as_ref().expect("validated");
            let t = load_tabular_csv(path, &d.label_column, d.has_header)
                .map_err(|e| with_path(path, e))?;
            (t.features, t.labels)
        }
    };
    if d.imbalance_ratio > 1.0 {
        let mut rng = Rng::with_stream(cfg.seed, IMBALANCE_STREAM);
        (features, labels) =
            apply_exponential_imbalance(&features, &labels, d.imbalance_ratio, &mut rng)?;
    }
    if d.standardize {
        standardize_features(&mut features);
    }
    Ok(apply_open_world_split(features, labels, &cfg.split_config())?)
}

fn with_path(path: &Path, e: orca_core::Error) -> CliError {
    let msg = format!("{}: {e}", path.display());
    if e.is_usage() || matches!(e, orca_core::Error::Format(_)) {
        CliError::Usage(msg)
    } else {
        CliError::Runtime(msg)
    }
}

/// Per-class row counts split into labeled and unlabeled, one line per class.
pub fn dataset_summary(ds: &OpenWorldDataset) -> String {
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (i, &y) in ds.labels.iter().enumerate() {
        let e = per.entry(y).or_default();
        if ds.labeled_mask[i] {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    let mut out = format!(
        "{} rows, {} features, {} labeled, {} unlabeled\n{:>6} {:>6} {:>8} {:>10}\n",
        ds.num_rows(),
        ds.num_features(),
        ds.num_labeled(),
        ds.num_unlabeled(),
        "class",
        "kind",
        "labeled",
        "unlabeled"
    );
    for (class, (l, u)) in per {
        let kind = if ds.seen_classes.binary_search(&class).is_ok() { "seen" } else { "novel" };
        out.push_str(&format!("{class:>6} {kind:>6} {l:>8} {u:>10}\n"));
    }
    out
}

/// Generates the configured dataset and writes it to `out_path`.
pub fn cmd_generate(cfg: &ExperimentConfig, out_path: &Path) -> CliResult<OpenWorldDataset> {
    let ds = build_dataset(cfg)?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_dataset(&ds, out_path).map_err(|e| with_path(out_path, e))?;
    Ok(ds)
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub resolved_config: String,
    pub dataset: OpenWorldDataset,
    pub model: Model,
    pub checkpoint: Vec<u8>,
    pub logs: Vec<EpochLog>,
    pub report: EvalReport,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    epoch_log_schema: u32,
    epochs: usize,
    num_heads: usize,
    report: &'a EvalReport,
}

impl RunArtifacts {
    pub fn report_json(&self) -> CliResult<String> {
        let file = ReportFile {
            epoch_log_schema: EPOCH_LOG_SCHEMA_VERSION,
            epochs: self.logs.len(),
            num_heads: self.model.num_heads(),
            report: &self.report,
        };
        let mut s = serde_json::to_string_pretty(&file)
            .map_err(|e| CliError::Runtime(format!("cannot serialize report: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn epoch_log(&self, format: MetricsFormat) -> String {
        emit_metrics(&self.logs, format)
    }

    /// Writes all artifacts into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path, format: MetricsFormat) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_CONFIG_FILE), &self.resolved_config)?;
        fs::write(dir.join(CHECKPOINT_FILE), &self.checkpoint)?;
        save_dataset(&self.dataset, dir.join(DATASET_FILE))?;
        fs::write(dir.join(format!("epochs.{}", format.extension())), self.epoch_log(format))?;
        fs::write(dir.join(REPORT_JSON_FILE), self.report_json()?)?;
        fs::write(dir.join(REPORT_TEXT_FILE), format!("{}\n", self.report))?;
        Ok(())
    }
}

/// Builds the dataset and model, trains, and evaluates the final model.
pub fn cmd_train(cfg: &ExperimentConfig, overrides: &[Override]) -> CliResult<RunArtifacts> {
    let resolved_config = cfg.to_resolved_toml(overrides)?;
    let dataset = build_dataset(cfg)?;
    let model_cfg = cfg.model_config(
        dataset.num_features(),
        dataset.seen_classes.len(),
        dataset.novel_classes.len(),
    );
    let model = Model::init(model_cfg, &mut Rng::with_stream(cfg.seed, INIT_STREAM))?;
    let loss = cfg.loss_config()?;
    let train = cfg.train_config();
    let eval_cfg = cfg.eval_config();
    log::info!(
        "training {} parameters on {} rows ({} labeled) for {} epochs",
        model.num_parameters(),
        dataset.num_rows(),
        dataset.num_labeled(),
        train.epochs
    );
    let out = fit(model, &dataset, &loss, &train, &eval_cfg, |l| {
        log::debug!(
            "epoch {:>4}  u_bar {}  loss {}  seen {}  novel {}  all {}",
            l.epoch,
            format_sig6(l.u_bar),
            format_sig6(l.loss_total),
            format_sig6(l.eval.seen_accuracy),
            format_sig6(l.eval.novel_accuracy),
            format_sig6(l.eval.all_accuracy)
        );
    })?;
    let report = evaluate(&out.model, &dataset, &eval_cfg)?;
    let checkpoint = out.model.checkpoint_bytes()?;
    Ok(RunArtifacts {
        resolved_config,
        dataset,
        model: out.model,
        checkpoint,
        logs: out.logs,
        report,
    })
}

/// Evaluates a checkpoint on the unlabeled rows of a dataset container.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, dataset: &Path) -> CliResult<EvalReport> {
    let model = Model::load_checkpoint(checkpoint).map_err(|e| with_path(checkpoint, e))?;
    let ds = load_dataset(dataset).map_err(|e| with_path(dataset, e))?;
    Ok(evaluate(&model, &ds, &cfg.eval_config())?)
}

pub const SWEEP_PARAMETERS: [&str; 7] = [
    "lambda",
    "eta1",
    "eta2",
    "s",
    "fixed_margin",
    "labeled_fraction",
    "seen_class_fraction",
];

/// Config key a sweep parameter maps to.
pub fn sweep_key(param: &str) -> CliResult<&'static str> {
    Ok(match param {
        "lambda" => "loss.lambda",
        "eta1" => "loss.eta1",
        "eta2" => "loss.eta2",
        "s" => "loss.s",
        "fixed_margin" => "loss.fixed_margin",
        "labeled_fraction" => "dataset.labeled_fraction",
        "seen_class_fraction" => "dataset.seen_class_fraction",
        other => {
            return Err(CliError::Usage(format!(
                "unknown sweep parameter `{other}`; expected one of {}",
                SWEEP_PARAMETERS.join(", ")
            )))
        }
    })
}

/// Removes repeated values, keeping first occurrences in order.
pub fn dedup_values(values: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(values.len());
    for &v in values {
        if out.iter().any(|u| u.to_bits() == v.to_bits() || *u == v) {
            log::warn!("duplicate sweep value {v} ignored");
        } else {
            out.push(v);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub dir_name: String,
    pub artifacts: RunArtifacts,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub parameter: String,
    pub rows: Vec<SweepRow>,
}

impl SweepOutput {
    /// One line per value: the value and the final seen / novel / all metrics.
    pub fn table(&self, format: MetricsFormat) -> String {
        let cols = [self.parameter.as_str(), "seen_accuracy", "novel_accuracy", "novel_nmi", "all_accuracy", "active_novel_heads"];
        let mut out = String::new();
        if format == MetricsFormat::Csv {
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        for row in &self.rows {
            let r = &row.artifacts.report;
            let vals = [
                format_sig6(row.value),
                format_sig6(r.seen_accuracy),
                format_sig6(r.novel_accuracy),
                format_sig6(r.novel_nmi),
                format_sig6(r.all_accuracy),
                r.active_novel_heads.to_string(),
            ];
            match format {
                MetricsFormat::Csv => out.push_str(&vals.join(",")),
                MetricsFormat::Jsonl => {
                    let fields: Vec<String> =
                        cols.iter().zip(&vals).map(|(c, v)| format!("\"{c}\":{v}")).collect();
                    out.push('{');
                    out.push_str(&fields.join(","));
                    out.push('}');
                }
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text table.
    pub fn text_table(&self) -> String {
        let mut out = format!(
            "{:>14} {:>8} {:>8} {:>8} {:>8}\n",
            self.parameter, "Seen", "Novel", "NMI", "All"
        );
        for row in &self.rows {
            let r = &row.artifacts.report;
            out.push_str(&format!(
                "{:>14} {:>8.1} {:>8.1} {:>8.3} {:>8.1}\n",
                format_sig6(row.value),
                100.0 * r.seen_accuracy,
                100.0 * r.novel_accuracy,
                r.novel_nmi,
                100.0 * r.all_accuracy
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path, format: MetricsFormat) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        for row in &self.rows {
            row.artifacts.write(&dir.join(&row.dir_name), format)?;
        }
        fs::write(dir.join(format!("sweep.{}", format.extension())), self.table(format))?;
        fs::write(dir.join("sweep.txt"), self.text_table())?;
        Ok(())
    }
}

/// One full train + eval per value; everything else in the config is held fixed.
///
/// `text` and `overrides` are the base document and user overrides; the swept
/// key is applied last. With `parallel`, values run on separate threads and
/// rows are still returned in value order.
pub fn cmd_sweep(
    text: &str,
    overrides: &[Override],
    param: &str,
    values: &[f64],
    parallel: bool,
) -> CliResult<SweepOutput> {
    let key = sweep_key(param)?;
    if values.is_empty() {
        return Err(CliError::Usage(format!("sweep over `{param}` needs at least one value")));
    }
    let values = dedup_values(values);
    let mut configs = Vec::with_capacity(values.len());
    for &v in &values {
        let mut all = overrides.to_vec();
        all.push(Override { key: key.to_string(), value: toml::Value::Float(v) });
        let cfg = parse_config_with(text, &all)?;
        if param == "fixed_margin" && cfg.loss.margin_mode != MarginKind::Fixed {
            log::warn!("sweeping fixed_margin has no effect unless loss.margin_mode = \"fixed\"");
        }
        configs.push((v, cfg, all));
    }
    let run = |(v, cfg, all): &(f64, ExperimentConfig, Vec<Override>)| -> CliResult<SweepRow> {
        log::info!("sweep {param} = {v}");
        Ok(SweepRow {
            value: *v,
            dir_name: format!("{param}={}", format_sig6(*v)),
            artifacts: cmd_train(cfg, all)?,
        })
    };
    let rows = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = configs.iter().map(|c| scope.spawn(move || run(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("sweep worker panicked".into()))))
                .collect::<CliResult<Vec<_>>>()
        })?
    } else {
        configs.iter().map(run).collect::<CliResult<Vec<_>>>()?
    };
    Ok(SweepOutput { parameter: param.to_string(), rows })
}

/// Reads a config file, or returns an empty document when no path is given.
pub fn read_config_text(path: Option<&PathBuf>) -> CliResult<String> {
    match path {
        None => Ok(String::new()),
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn small() -> ExperimentConfig {
        parse_config(
            "[dataset]\nper_class = 20\n[model]\nhidden_dims = [8]\nembed_dim = 4\n[train]\nepochs = 2\nbatch_size = 32\n",
        )
        .unwrap()
    }

    #[test]
    fn dataset_is_split_and_summarized() {
        let ds = build_dataset(&small()).unwrap();
        assert_eq!(ds.num_rows(), 120);
        assert_eq!(ds.seen_classes.len(), 3);
        let s = dataset_summary(&ds);
        assert_eq!(s.lines().count(), 2 + 6);
        assert!(s.contains("novel"));
    }

    #[test]
    fn zero_epochs_gives_empty_log_and_untrained_eval() {
        let mut cfg = small();
        cfg.train.epochs = 0;
        let a = cmd_train(&cfg, &[]).unwrap();
        assert!(a.logs.is_empty());
        assert_eq!(a.epoch_log(MetricsFormat::Jsonl), "");
        assert_eq!(a.epoch_log(MetricsFormat::Csv).lines().count(), 1);
        assert_eq!(a.report.head_counts.iter().sum::<usize>(), a.dataset.num_unlabeled());
    }

    #[test]
    fn final_report_matches_last_epoch() {
        let a = cmd_train(&small(), &[]).unwrap();
        assert_eq!(a.logs.len(), 2);
        assert_eq!(a.logs.last().unwrap().eval, a.report);
    }

    #[test]
    fn sweep_parameter_validation() {
        assert!(sweep_key("lr").unwrap_err().is_usage());
        assert!(cmd_sweep("", &[], "lambda", &[], false).unwrap_err().is_usage());
        assert_eq!(dedup_values(&[0.6, 1.0, 0.6, 1.4, 1.0]), vec![0.6, 1.0, 1.4]);
    }

    #[test]
    fn imbalance_shrinks_later_classes() {
        let mut cfg = small();
        cfg.dataset.imbalance_ratio = 10.0;
        let ds = build_dataset(&cfg).unwrap();
        let sizes = ds.class_sizes();
        assert_eq!(sizes[&0], 20);
        assert_eq!(sizes[&5], 2);
    }
}
