//! CSV forms of the run log.
//!
//! - `runlog.csv`: one row per evaluated offspring
//! - `summary.csv`: one row per generation
//! - `retrains.csv`: re-trainings outside the base evaluations
//!
//! Floats are written in shortest round-trip form, so equal logs give
//! byte-identical files. Missing values are empty cells.

use std::path::Path;

use evonet_core::evolution::{GenerationSummary, LogRow, RetrainRow, RunLog};
use evonet_core::fitness::Regime;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, IoContext, Result};
use crate::genome_io::write_atomic;

pub const RUNLOG_FILE: &str = "runlog.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RETRAINS_FILE: &str = "retrains.csv";

#[derive(Serialize)]
struct RowOut {
    generation: usize,
    individual: usize,
    #[serde(rename = "C")]
    c: f64,
    #[serde(rename = "A")]
    a: Option<f64>,
    #[serde(rename = "F")]
    f: f64,
    regime: String,
    ill_fitted_reason: String,
    budget: u64,
    cached: bool,
}

/// A row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub generation: usize,
    pub regime: String,
    pub best_f: f64,
    pub best_c: f64,
    pub best_a: Option<f64>,
    pub mean_f: f64,
    pub parent_budget: u64,
    pub flipped: bool,
}

impl From<&GenerationSummary> for SummaryRecord {
    fn from(s: &GenerationSummary) -> Self {
        SummaryRecord {
            generation: s.generation,
            regime: s.regime.to_string(),
            best_f: s.best_f,
            best_c: s.best_c,
            best_a: s.best_a,
            mean_f: s.mean_f,
            parent_budget: s.parent_budget,
            flipped: s.flipped,
        }
    }
}

impl SummaryRecord {
    pub fn is_warmup(&self) -> bool {
        self.regime == Regime::Warmup.to_string()
    }
}

fn to_csv<S: Serialize>(rows: impl IntoIterator<Item = S>, header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| format_err(e.to_string()))
}

pub fn runlog_csv(rows: &[LogRow]) -> Result<Vec<u8>> {
    to_csv(
        rows.iter().map(|r| RowOut {
            generation: r.generation,
            individual: r.individual,
            c: r.c,
            a: r.a,
            f: r.f,
            regime: r.regime.to_string(),
            ill_fitted_reason: r.ill_fitted.map(|i| i.to_string()).unwrap_or_default(),
            budget: r.budget,
            cached: r.cached,
        }),
        &["generation", "individual", "C", "A", "F", "regime", "ill_fitted_reason", "budget", "cached"],
    )
}

pub fn summary_csv(summaries: &[GenerationSummary]) -> Result<Vec<u8>> {
    to_csv(
        summaries.iter().map(SummaryRecord::from),
        &["generation", "regime", "best_f", "best_c", "best_a", "mean_f", "parent_budget", "flipped"],
    )
}

pub fn retrains_csv(rows: &[RetrainRow]) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Out<'a> {
        generation: usize,
        individual: usize,
        reason: &'a str,
        from_budget: u64,
        to_budget: u64,
        f_before: f64,
        f_after: f64,
        accepted: bool,
    }
    to_csv(
        rows.iter().map(|r| Out {
            generation: r.generation,
            individual: r.individual,
            reason: match r.reason {
                evonet_core::evolution::RetrainReason::FairComparison => "fair-comparison",
                evonet_core::evolution::RetrainReason::RegimeFlip => "regime-flip",
            },
            from_budget: r.from_budget,
            to_budget: r.to_budget,
            f_before: r.f_before,
            f_after: r.f_after,
            accepted: r.accepted,
        }),
        &["generation", "individual", "reason", "from_budget", "to_budget", "f_before", "f_after", "accepted"],
    )
}

/// Writes the three CSV files into `dir`.
pub fn write_all(dir: &Path, log: &RunLog) -> Result<()> {
    write_atomic(&dir.join(RUNLOG_FILE), &runlog_csv(&log.rows)?)?;
    write_atomic(&dir.join(SUMMARY_FILE), &summary_csv(&log.summaries)?)?;
    write_atomic(&dir.join(RETRAINS_FILE), &retrains_csv(&log.retrains)?)
}

/// Reads a summary. `path` may be a run directory, `summary.csv`, or
/// `runlog.csv` with `summary.csv` beside it.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRecord>> {
    let file = if path.is_dir() {
        path.join(SUMMARY_FILE)
    } else if path.file_name().is_some_and(|n| n == RUNLOG_FILE) {
        path.with_file_name(SUMMARY_FILE)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file).at(&file)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows = r.deserialize().collect::<std::result::Result<Vec<SummaryRecord>, _>>()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use evonet_core::fitness::IllFitted;

    fn row(g: usize, a: Option<f64>, ill: Option<IllFitted>) -> LogRow {
        LogRow {
            generation: g,
            individual: 1,
            c: 0.5,
            a,
            f: 0.1 + 0.2,
            regime: Regime::Fbeta,
            ill_fitted: ill,
            budget: 300,
            cached: false,
        }
    }

    #[test]
    fn runlog_columns() {
        let text = String::from_utf8(
            runlog_csv(&[row(0, Some(0.25), None), row(1, None, Some(IllFitted::TrivialClassifier))]).unwrap(),
        )
        .unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "generation,individual,C,A,F,regime,ill_fitted_reason,budget,cached");
        assert_eq!(lines[1], "0,1,0.5,0.25,0.30000000000000004,fbeta,,300,false");
        assert_eq!(lines[2], format!("1,1,0.5,,0.30000000000000004,fbeta,{},300,false", IllFitted::TrivialClassifier));
    }

    #[test]
    fn summaries_round_trip() {
        let s = GenerationSummary {
            generation: 3,
            regime: Regime::Warmup,
            best_f: 0.123456789,
            best_c: 0.123456789,
            best_a: None,
            mean_f: -0.25,
            parent_budget: 600,
            flipped: true,
        };
        let dir = tempfile::tempdir().unwrap();
        let log = RunLog { rows: vec![], summaries: vec![s.clone()], retrains: vec![] };
        write_all(dir.path(), &log).unwrap();
        let back = read_summary(&dir.path().join(RUNLOG_FILE)).unwrap();
        assert_eq!(back, vec![SummaryRecord::from(&s)]);
        assert!(back[0].is_warmup());
    }
}
