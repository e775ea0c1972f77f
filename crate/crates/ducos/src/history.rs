//! CSV outputs: per-epoch training history and evaluation metrics tables.

use std::fs;
use std::path::Path;

use ducos_core::metrics::MetricsReport;
use ducos_core::trainer::EpochRecord;

use crate::error::{AppError, Result};

pub const HISTORY_HEADER: &str = "epoch,l_rec,l_cf,l_gr,lambda,mu,eta_lambda,eta_mu";

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.l_rec, r.l_cf, r.l_gr, r.lambda, r.mu, r.eta_lambda, r.eta_mu
        ));
    }
    out
}

pub fn write_history(path: &Path, records: &[EpochRecord]) -> Result<()> {
    fs::write(path, history_csv(records))?;
    Ok(())
}

pub fn parse_history(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == HISTORY_HEADER => {}
        other => {
            return Err(AppError::Data(format!(
                "bad history header: {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(AppError::Data(format!(
                "history line {}: expected 8 fields, got {}",
                ln + 2,
                fields.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .trim()
                .parse()
                .map_err(|_| AppError::Data(format!("history line {}: bad number", ln + 2)))
        };
        records.push(EpochRecord {
            epoch: fields[0]
                .trim()
                .parse()
                .map_err(|_| AppError::Data(format!("history line {}: bad epoch", ln + 2)))?,
            l_rec: f(1)?,
            l_cf: f(2)?,
            l_gr: f(3)?,
            lambda: f(4)?,
            mu: f(5)?,
            eta_lambda: f(6)?,
            eta_mu: f(7)?,
        });
    }
    Ok(records)
}

/// One evaluated (scale, regime) grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub scale: f64,
    pub regime: String,
    pub report: MetricsReport,
}

pub fn metrics_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("scale,regime,rmse,mae");
    if let Some(first) = rows.first() {
        for (t, _) in &first.report.delta {
            out.push_str(&format!(",delta_{t}"));
        }
    }
    out.push_str(",n_samples\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}", r.scale, r.regime, r.report.rmse, r.report.mae));
        for (_, v) in &r.report.delta {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", r.report.n_samples));
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[EvalRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows))?;
    Ok(())
}
