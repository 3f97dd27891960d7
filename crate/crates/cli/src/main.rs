use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use orca_cli::commands::{
    cmd_eval, cmd_generate, cmd_sweep, cmd_train, dataset_summary, read_config_text,
    REPORT_JSON_FILE, REPORT_TEXT_FILE,
};
use orca_cli::config::{parse_config_with, ExperimentConfig, MetricsFormat, Override};
use orca_cli::{CliError, CliResult};

/// Open-world semi-supervised learning experiments.
#[derive(Parser)]
#[command(name = "orca", version)]
struct Cli {
    /// Log per-epoch progress.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the top-level `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides a config key, e.g. `--set loss.lambda=0.6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

impl From<FormatArg> for MetricsFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => MetricsFormat::Csv,
            FormatArg::Jsonl => MetricsFormat::Jsonl,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the configured dataset and write it as a dataset container.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the run artifacts.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Epoch-log format (overrides `output.format`).
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Evaluate a checkpoint on the unlabeled rows of a dataset container.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for report.json and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of lambda, eta1, eta2, s, fixed_margin, labeled_fraction, seen_class_fraction.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        /// Output directory; one subdirectory per value plus the sweep table.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Format of the epoch logs and the sweep table.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Run values on separate threads.
        #[arg(long)]
        parallel: bool,
    },
}

fn overrides(common: &Common, extra: Vec<Override>) -> CliResult<Vec<Override>> {
    let mut out = common
        .set
        .iter()
        .map(|s| Override::parse(s))
        .collect::<CliResult<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        out.push(Override { key: "seed".into(), value: toml::Value::Integer(seed as i64) });
    }
    out.extend(extra);
    Ok(out)
}

fn cli_overrides(out: &Option<PathBuf>, format: Option<FormatArg>) -> Vec<Override> {
    let mut v = Vec::new();
    if let Some(dir) = out {
        v.push(Override {
            key: "output.dir".into(),
            value: toml::Value::String(dir.display().to_string()),
        });
    }
    if let Some(f) = format {
        let f: MetricsFormat = f.into();
        v.push(Override { key: "output.format".into(), value: toml::Value::String(f.extension().into()) });
    }
    v
}

fn load(common: &Common, extra: Vec<Override>) -> CliResult<(String, Vec<Override>, ExperimentConfig)> {
    let text = read_config_text(common.config.as_ref())?;
    let ovr = overrides(common, extra)?;
    let cfg = parse_config_with(&text, &ovr)?;
    Ok((text, ovr, cfg))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { common, out } => {
            let (_, _, cfg) = load(&common, Vec::new())?;
            let ds = cmd_generate(&cfg, &out)?;
            print!("{}", dataset_summary(&ds));
            println!("wrote {}", out.display());
        }
        Command::Train { common, out, format } => {
            let (_, ovr, cfg) = load(&common, cli_overrides(&out, format))?;
            let artifacts = cmd_train(&cfg, &ovr)?;
            artifacts.write(&cfg.output.dir, cfg.output.format)?;
            println!("{}", artifacts.report);
            println!("artifacts in {}", cfg.output.dir.display());
        }
        Command::Eval { common, checkpoint, data, out } => {
            let (_, _, cfg) = load(&common, Vec::new())?;
            let report = cmd_eval(&cfg, &checkpoint, &data)?;
            println!("{report}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let json = serde_json::to_string_pretty(&report)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                std::fs::write(dir.join(REPORT_JSON_FILE), json + "\n")?;
                std::fs::write(dir.join(REPORT_TEXT_FILE), format!("{report}\n"))?;
            }
        }
        Command::Sweep { common, param, values, out, format, parallel } => {
            let (text, ovr, cfg) = load(&common, cli_overrides(&out, format))?;
            let sweep = cmd_sweep(&text, &ovr, &param, &values, parallel)?;
            sweep.write(&cfg.output.dir, cfg.output.format)?;
            print!("{}", sweep.text_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
