//! Grid search over `(rho, C, eta)` selected by worst-group validation accuracy.

use super::config::ExperimentConfig;
use super::train::{run_experiment, ExperimentSummary};
use crate::error::{Error, Result};
use crate::robust_opt::AlgorithmRegistry;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub rho: f64,
    pub adjustment_c: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub index: usize,
    pub cell: Cell,
    /// Mean over successful seeds; `None` if every seed failed.
    pub mean_val_worst: Option<f64>,
    pub summary: ExperimentSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub algorithm: String,
    pub cells: Vec<CellResult>,
    pub best: usize,
}

impl SweepResult {
    pub fn best_cell(&self) -> &CellResult {
        &self.cells[self.best]
    }
}

/// Expands the sweep axes of `cfg`. Axes the algorithm ignores collapse to
/// the base value so equivalent runs are not repeated.
pub fn grid_cells(cfg: &ExperimentConfig, registry: &AlgorithmRegistry) -> Result<Vec<Cell>> {
    let algorithm = registry.get(&cfg.algorithm)?;
    let axis = |values: &[f64], base: f64, used: bool| -> Vec<f64> {
        if values.is_empty() || !used {
            vec![base]
        } else {
            values.to_vec()
        }
    };
    let rhos = axis(&cfg.sweep.rho, cfg.optim.rho, algorithm.uses_perturbation());
    let cs = axis(
        &cfg.sweep.adjustment_c,
        cfg.optim.adjustment_c,
        algorithm.uses_group_weights(),
    );
    let etas = axis(&cfg.sweep.eta, cfg.optim.eta, true);
    let mut cells = Vec::with_capacity(rhos.len() * cs.len() * etas.len());
    for &rho in &rhos {
        for &adjustment_c in &cs {
            for &eta in &etas {
                cells.push(Cell {
                    rho,
                    adjustment_c,
                    eta,
                });
            }
        }
    }
    Ok(cells)
}

pub fn cell_config(base: &ExperimentConfig, cell: &Cell) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.optim.rho = cell.rho;
    cfg.optim.adjustment_c = cell.adjustment_c;
    cfg.optim.eta = cell.eta;
    cfg.sweep = Default::default();
    cfg
}

/// Index of the largest score; ties and `None` resolve to the earliest cell.
fn select(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = *s {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Runs every cell; with `out`, cell `i` writes under `cell_<i>/` and the
/// sweep writes `sweep.csv` and `sweep.json`.
pub fn sweep(
    cfg: &ExperimentConfig,
    registry: &AlgorithmRegistry,
    out: Option<&Path>,
) -> Result<SweepResult> {
    cfg.validate(registry)?;
    let cells = grid_cells(cfg, registry)?;
    let mut results = Vec::with_capacity(cells.len());
    for (index, cell) in cells.iter().enumerate() {
        let cell_cfg = cell_config(cfg, cell);
        let dir = out.map(|d| d.join(format!("cell_{index}")));
        let run = run_experiment(&cell_cfg, registry, dir.as_deref())?;
        let ok: Vec<f64> = run.summary.seeds.iter().filter_map(|s| s.val_worst).collect();
        let mean_val_worst = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
        log::info!(
            "{} cell {index} rho={} C={} eta={}: mean val worst {:?}",
            cfg.algorithm,
            cell.rho,
            cell.adjustment_c,
            cell.eta,
            mean_val_worst
        );
        results.push(CellResult {
            index,
            cell: *cell,
            mean_val_worst,
            summary: run.summary,
        });
    }
    let scores: Vec<Option<f64>> = results.iter().map(|c| c.mean_val_worst).collect();
    let best = select(&scores).ok_or_else(|| {
        Error::InvalidArgument(format!("every sweep cell of {} failed", cfg.algorithm))
    })?;
    let result = SweepResult {
        algorithm: results[0].summary.algorithm.clone(),
        cells: results,
        best,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.csv"), sweep_csv(&result))?;
        std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&result)?)?;
    }
    Ok(result)
}

/// One row per `(cell, seed)`; test-bed columns follow the first successful seed.
pub fn sweep_csv(result: &SweepResult) -> String {
    let beds: Vec<String> = result
        .cells
        .iter()
        .flat_map(|c| &c.summary.seeds)
        .find(|s| s.ok)
        .map(|s| s.test.iter().map(|t| t.0.clone()).collect())
        .unwrap_or_default();
    let mut out = String::from("cell,rho,adjustment_c,eta,seed,ok,selected_epoch,val_worst");
    for b in &beds {
        let _ = write!(out, ",{b}_average,{b}_worst");
    }
    out.push('\n');
    for c in &result.cells {
        for s in &c.summary.seeds {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.index,
                c.cell.rho,
                c.cell.adjustment_c,
                c.cell.eta,
                s.seed,
                s.ok,
                s.selected_epoch.map(|e| e.to_string()).unwrap_or_default(),
                s.val_worst.map(|v| v.to_string()).unwrap_or_default()
            );
            for b in &beds {
                match s.test.iter().find(|t| &t.0 == b) {
                    Some((_, avg, worst)) => {
                        let _ = write!(out, ",{avg},{worst}");
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
    }
    out
}
