//! Aggregation of experiment summaries into per-algorithm test-bed tables.

use super::sweep::SweepResult;
use super::train::ExperimentSummary;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            n,
            median,
            mean,
            std,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub algorithm: String,
    pub test_bed: String,
    pub average: Stats,
    pub worst: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub failed_seeds: BTreeMap<String, Vec<u64>>,
}

impl Report {
    pub fn get(&self, algorithm: &str, test_bed: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.algorithm == algorithm && r.test_bed == test_bed)
    }

    /// Pivoted markdown table of median average accuracy (percent).
    pub fn markdown(&self) -> String {
        let mut beds: Vec<&str> = Vec::new();
        let mut algs: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !beds.contains(&r.test_bed.as_str()) {
                beds.push(&r.test_bed);
            }
            if !algs.contains(&r.algorithm.as_str()) {
                algs.push(&r.algorithm);
            }
        }
        let mut s = String::from("| algorithm |");
        for b in &beds {
            let _ = write!(s, " {b} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(beds.len()));
        s.push('\n');
        for a in &algs {
            let _ = write!(s, "| {a} |");
            for b in &beds {
                match self.get(a, b) {
                    Some(r) => {
                        let _ = write!(s, " {:.1} ± {:.1} |", 100.0 * r.average.median, 100.0 * r.average.std);
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("algorithm,test_bed,metric,n,median,mean,std\n");
        for r in &self.rows {
            for (metric, st) in [("average", &r.average), ("worst", &r.worst)] {
                let _ = writeln!(
                    s,
                    "{},{},{metric},{},{},{},{}",
                    r.algorithm, r.test_bed, st.n, st.median, st.mean, st.std
                );
            }
        }
        s
    }
}

/// Folds summaries in the given order. Rows are sorted by algorithm name and
/// keep the test-bed order of first appearance.
pub fn aggregate(summaries: &[ExperimentSummary]) -> Report {
    let mut acc: BTreeMap<String, Vec<(String, Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    let mut failed: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for summary in summaries {
        let beds = acc.entry(summary.algorithm.clone()).or_default();
        for seed in &summary.seeds {
            if !seed.ok {
                failed.entry(summary.algorithm.clone()).or_default().push(seed.seed);
                continue;
            }
            for (name, avg, worst) in &seed.test {
                let idx = match beds.iter().position(|b| &b.0 == name) {
                    Some(i) => i,
                    None => {
                        beds.push((name.clone(), Vec::new(), Vec::new()));
                        beds.len() - 1
                    }
                };
                beds[idx].1.push(*avg);
                beds[idx].2.push(*worst);
            }
        }
    }
    let rows = acc
        .into_iter()
        .flat_map(|(alg, beds)| {
            beds.into_iter().filter_map(move |(bed, avg, worst)| {
                Some(ReportRow {
                    algorithm: alg.clone(),
                    test_bed: bed,
                    average: Stats::of(&avg)?,
                    worst: Stats::of(&worst)?,
                })
            })
        })
        .collect();
    Report {
        rows,
        failed_seeds: failed,
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if matches!(
            p.file_name().and_then(|n| n.to_str()),
            Some("summary.json") | Some("sweep.json")
        ) {
            out.push(p);
        }
    }
    Ok(())
}

/// Loads the summaries under `dir`. A `sweep.json` contributes its selected
/// cell and hides the per-cell `summary.json` files beneath it.
pub fn load_summaries(dir: &Path) -> Result<Vec<ExperimentSummary>> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let sweep_roots: Vec<PathBuf> = files
        .iter()
        .filter(|p| p.file_name().is_some_and(|n| n == "sweep.json"))
        .filter_map(|p| p.parent().map(Path::to_path_buf))
        .collect();
    let mut out = Vec::new();
    for p in files {
        let text = std::fs::read_to_string(&p)?;
        if p.file_name().is_some_and(|n| n == "sweep.json") {
            let sweep: SweepResult = serde_json::from_str(&text)?;
            out.push(sweep.best_cell().summary.clone());
        } else {
            let parent = p.parent().unwrap_or(Path::new(""));
            if sweep_roots.iter().any(|r| parent != r && parent.starts_with(r)) {
                continue;
            }
            out.push(serde_json::from_str(&text)?);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no summary.json or sweep.json under {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Aggregates `dir` and writes `report.json`, `report.csv` and `report.md` to `out`.
pub fn write_report(dir: &Path, out: &Path) -> Result<Report> {
    let report = aggregate(&load_summaries(dir)?);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.join("report.csv"), report.csv())?;
    std::fs::write(out.join("report.md"), report.markdown())?;
    Ok(report)
}
