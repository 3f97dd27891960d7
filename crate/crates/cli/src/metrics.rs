//! Epoch-log serialization.
//!
//! Columns, in order: `epoch, lr, u_bar, margin, loss_supervised,
//! loss_pairwise, loss_regularizer, loss_total, pseudo_label_accuracy,
//! batches, unsupervised_batches, dropped_rows, seen_accuracy,
//! novel_accuracy, novel_nmi, all_accuracy, active_novel_heads, head_counts`.
//!
//! Reals carry 6 significant digits. A missing pseudo-label accuracy is an
//! empty CSV cell and `null` in JSONL. `head_counts` is a JSON array, or a
//! `;`-joined list in CSV. Both formats are produced from the same cell
//! strings, so they always encode identical values.

use orca_core::EpochLog;

use crate::config::MetricsFormat;

/// Bumped whenever a column is added, removed or reinterpreted.
pub const EPOCH_LOG_SCHEMA_VERSION: u32 = 1;

pub const EPOCH_LOG_COLUMNS: [&str; 18] = [
    "epoch",
    "lr",
    "u_bar",
    "margin",
    "loss_supervised",
    "loss_pairwise",
    "loss_regularizer",
    "loss_total",
    "pseudo_label_accuracy",
    "batches",
    "unsupervised_batches",
    "dropped_rows",
    "seen_accuracy",
    "novel_accuracy",
    "novel_nmi",
    "all_accuracy",
    "active_novel_heads",
    "head_counts",
];

/// `%.6g`-style rendering: fixed notation for exponents in [-4, 6), scientific
/// otherwise, trailing zeros removed. Non-finite values become `NaN`/`inf`/`-inf`.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

enum Cell {
    Int(usize),
    Real(f64),
    Missing,
    Counts(Vec<usize>),
}

fn cells(log: &EpochLog) -> Vec<Cell> {
    let e = &log.eval;
    vec![
        Cell::Int(log.epoch),
        Cell::Real(log.lr),
        Cell::Real(log.u_bar),
        Cell::Real(log.margin),
        Cell::Real(log.loss_supervised),
        Cell::Real(log.loss_pairwise),
        Cell::Real(log.loss_regularizer),
        Cell::Real(log.loss_total),
        log.pseudo_label_accuracy.map_or(Cell::Missing, Cell::Real),
        Cell::Int(log.batches),
        Cell::Int(log.unsupervised_batches),
        Cell::Int(log.dropped_rows),
        Cell::Real(e.seen_accuracy),
        Cell::Real(e.novel_accuracy),
        Cell::Real(e.novel_nmi),
        Cell::Real(e.all_accuracy),
        Cell::Int(e.active_novel_heads),
        Cell::Counts(e.head_counts.clone()),
    ]
}

fn join_counts(c: &[usize], sep: &str) -> String {
    c.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

fn json_real(x: f64) -> String {
    if x.is_finite() {
        format_sig6(x)
    } else {
        format!("\"{}\"", format_sig6(x))
    }
}

/// Renders the epoch log in the requested format.
pub fn emit_metrics(logs: &[EpochLog], format: MetricsFormat) -> String {
    let mut out = String::new();
    match format {
        MetricsFormat::Csv => {
            out.push_str(&EPOCH_LOG_COLUMNS.join(","));
            out.push('\n');
            for log in logs {
                let row: Vec<String> = cells(log)
                    .into_iter()
                    .map(|c| match c {
                        Cell::Int(v) => v.to_string(),
                        Cell::Real(v) => format_sig6(v),
                        Cell::Missing => String::new(),
                        Cell::Counts(v) => join_counts(&v, ";"),
                    })
                    .collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
        MetricsFormat::Jsonl => {
            for log in logs {
                let fields: Vec<String> = EPOCH_LOG_COLUMNS
                    .iter()
                    .zip(cells(log))
                    .map(|(name, c)| {
                        let v = match c {
                            Cell::Int(v) => v.to_string(),
                            Cell::Real(v) => json_real(v),
                            Cell::Missing => "null".into(),
                            Cell::Counts(v) => format!("[{}]", join_counts(&v, ",")),
                        };
                        format!("\"{name}\":{v}")
                    })
                    .collect();
                out.push('{');
                out.push_str(&fields.join(","));
                out.push_str("}\n");
            }
        }
    }
    out
}
