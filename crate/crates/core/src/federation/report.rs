use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EvalReport;
use crate::error::Result;

use super::pipeline::{RunOutcome, StaticOutcome};

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub fold: usize,
    pub timestamp: usize,
    pub strategy: String,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub class_ratio: String,
    pub seed: u64,
}

impl ResultRow {
    fn from_report(dataset: &str, fold: usize, seed: u64, class_ratio: &str, r: &EvalReport) -> Self {
        Self {
            dataset: dataset.to_string(),
            fold,
            timestamp: r.timestamp.unwrap_or(0),
            strategy: r.strategy.clone().unwrap_or_default(),
            macro_p: r.macro_p,
            macro_r: r.macro_r,
            macro_f1: r.macro_f1,
            class_ratio: class_ratio.to_string(),
            seed,
        }
    }
}

pub fn rows_for_run(out: &RunOutcome) -> Vec<ResultRow> {
    out.records
        .iter()
        .map(|rec| {
            let mut row = ResultRow::from_report(&out.dataset, out.fold, out.seed, &rec.class_ratio, &rec.report);
            row.timestamp = rec.timestamp;
            row.strategy = rec.strategy.clone();
            row
        })
        .collect()
}

/// Baselines first, then the federated row.
pub fn rows_for_static(out: &StaticOutcome) -> Vec<ResultRow> {
    let f = &out.federated;
    let ratio = f.records.first().map(|r| r.class_ratio.as_str()).unwrap_or("");
    let mut rows = vec![
        ResultRow::from_report(&f.dataset, f.fold, f.seed, ratio, &out.without_b),
        ResultRow::from_report(&f.dataset, f.fold, f.seed, ratio, &out.with_b),
    ];
    rows.extend(rows_for_run(f));
    rows
}

pub fn write_rows_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mean and population standard deviation of macro F1 per strategy, in
/// first-seen order.
pub fn f1_summary(rows: &[ResultRow]) -> Vec<(String, f64, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.strategy.as_str()) {
            names.push(&r.strategy);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let v: Vec<f64> = rows.iter().filter(|r| r.strategy == n).map(|r| r.macro_f1).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            (n.to_string(), mean, var.sqrt())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: &str, f1: f64) -> ResultRow {
        ResultRow {
            dataset: "bcw".into(),
            fold: 0,
            timestamp: 1,
            strategy: strategy.into(),
            macro_p: 0.5,
            macro_r: 0.5,
            macro_f1: f1,
            class_ratio: "23.3%:10.0% (70:30)".into(),
            seed: 7,
        }
    }

    #[test]
    fn csv_header_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![row("distill", 0.9), row("retrain", 0.4)];
        write_rows_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "dataset,fold,timestamp,strategy,macro_p,macro_r,macro_f1,class_ratio,seed"
        );
        assert_eq!(read_rows_csv(&p).unwrap(), rows);
    }

    #[test]
    fn summary_stats() {
        let s = f1_summary(&[row("a", 0.2), row("b", 1.0), row("a", 0.4)]);
        assert_eq!(s[0].0, "a");
        assert!((s[0].1 - 0.3).abs() < 1e-12 && (s[0].2 - 0.1).abs() < 1e-12);
        assert_eq!((s[1].1, s[1].2), (1.0, 0.0));
    }
}
