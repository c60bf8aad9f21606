//! Figure-ready outputs: toy-landscape grids and Hessian spectra.

use super::config::canonical_json;
use super::train::{load_bundle, Checkpoint};
use crate::error::{Error, Result};
use crate::landscape::{scan_objective, BallGrid, Bounds, GridScan, ObjectiveId, ToyScenario};
use crate::spectra::{per_group_spectrum, SpectrumConfig, SpectrumReport};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSummary {
    pub scenario: String,
    pub objective: String,
    pub rho: f64,
    pub bounds: Bounds,
    pub resolution: usize,
    pub ball_grid: BallGrid,
    pub argmin_theta: [f64; 2],
    pub argmin_value: f64,
    pub argmin_is_interior: bool,
    pub max_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapeParams {
    pub bounds: Bounds,
    pub resolution: usize,
    pub ball_grid: BallGrid,
    pub svg: bool,
}

impl Default for LandscapeParams {
    fn default() -> Self {
        Self {
            bounds: Bounds::square(5.0),
            resolution: 201,
            ball_grid: BallGrid::default(),
            svg: true,
        }
    }
}

pub fn landscape_summary(
    scenario_id: &str,
    scenario: &ToyScenario,
    objective: ObjectiveId,
    params: &LandscapeParams,
    scan: &GridScan,
) -> LandscapeSummary {
    LandscapeSummary {
        scenario: scenario_id.to_string(),
        objective: objective.as_str().to_string(),
        rho: scenario.rho,
        bounds: params.bounds,
        resolution: params.resolution,
        ball_grid: params.ball_grid,
        argmin_theta: [scan.argmin.theta1, scan.argmin.theta2],
        argmin_value: scan.argmin.value,
        argmin_is_interior: scan.argmin_is_interior(),
        max_value: scan.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Scans one objective and writes `<scenario>_<objective>.{csv,json,svg}` under `out`.
pub fn emit_landscape(
    scenario_id: &str,
    objective: ObjectiveId,
    params: &LandscapeParams,
    out: &Path,
) -> Result<(LandscapeSummary, LandscapeFiles)> {
    let scenario = ToyScenario::by_id(scenario_id)?;
    let scan = scan_objective(
        &scenario,
        objective,
        params.bounds,
        params.resolution,
        params.ball_grid,
    )?;
    let summary = landscape_summary(scenario_id, &scenario, objective, params, &scan);
    std::fs::create_dir_all(out)?;
    let stem = format!("{scenario_id}_{}", objective.as_str());
    let csv = out.join(format!("{stem}.csv"));
    let mut buf = Vec::new();
    scan.write_csv(&mut buf)?;
    std::fs::write(&csv, buf)?;
    let summary_path = out.join(format!("{stem}.json"));
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    let svg = if params.svg {
        let path = out.join(format!("{stem}.svg"));
        std::fs::write(&path, heatmap_svg(&scan, &format!("{scenario_id} {}", objective.as_str())))?;
        Some(path)
    } else {
        None
    };
    Ok((
        summary,
        LandscapeFiles {
            csv,
            summary: summary_path,
            svg,
        },
    ))
}

/// Linear ramp from dark blue (minimum) to light yellow (maximum).
fn ramp(t: f64) -> (u8, u8, u8) {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 1.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(20.0, 250.0), lerp(30.0, 230.0), lerp(110.0, 80.0))
}

/// Single-file SVG heatmap with the argmin marked by a red circle. The
/// `theta2` axis points up.
pub fn heatmap_svg(scan: &GridScan, title: &str) -> String {
    let n = scan.resolution;
    let cell = (600.0 / n as f64).max(1.0);
    let size = cell * n as f64;
    let lo = scan.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scan.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" shape-rendering="crispEdges">"#,
        w = size,
        h = size + 24.0
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="16" font-family="sans-serif" font-size="14">{title} (min {lo:.4}, max {hi:.4})</text>"#
    );
    let _ = writeln!(s, r#"<g transform="translate(0,24)">"#);
    for row in 0..n {
        let y = (n - 1 - row) as f64 * cell;
        for col in 0..n {
            let v = scan.values[row * n + col];
            let (r, g, b) = ramp((v - lo) / span);
            let _ = writeln!(
                s,
                r##"<rect x="{:.3}" y="{y:.3}" width="{cell:.3}" height="{cell:.3}" fill="#{r:02x}{g:02x}{b:02x}"/>"##,
                col as f64 * cell
            );
        }
    }
    let cx = (scan.argmin.col as f64 + 0.5) * cell;
    let cy = (n - 1 - scan.argmin.row) as f64 * cell + 0.5 * cell;
    let _ = writeln!(
        s,
        r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="{:.3}" fill="none" stroke="red" stroke-width="2"/>"#,
        (3.0 * cell).max(5.0)
    );
    s.push_str("</g>\n</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOutput {
    pub algorithm: String,
    pub seed: u64,
    pub epoch: usize,
    /// Fingerprint of the training config that produced the checkpoint.
    pub config_fingerprint: String,
    pub spectrum_config: SpectrumConfig,
    pub worst_group_largest: f64,
    pub report: SpectrumReport,
}

/// Spectra of the training-set group losses at `checkpoint`, using the
/// checkpoint's own config to rebuild its data.
pub fn spectrum_of(checkpoint: &Checkpoint, cfg: &SpectrumConfig) -> Result<SpectrumOutput> {
    let bundle = load_bundle(&checkpoint.config, checkpoint.seed)?;
    let report = per_group_spectrum(&checkpoint.model, &checkpoint.params, &bundle.train, cfg)?;
    Ok(SpectrumOutput {
        algorithm: checkpoint.config.algorithm.clone(),
        seed: checkpoint.seed,
        epoch: checkpoint.epoch,
        config_fingerprint: checkpoint.fingerprint.clone(),
        spectrum_config: *cfg,
        worst_group_largest: report.worst_group_largest(),
        report,
    })
}

/// Reads `checkpoint_path`, computes its spectrum and writes it to `out` as JSON.
pub fn emit_spectrum(
    checkpoint_path: &Path,
    cfg: &SpectrumConfig,
    out: &Path,
) -> Result<SpectrumOutput> {
    if !checkpoint_path.is_file() {
        return Err(Error::MissingCheckpoint(checkpoint_path.display().to_string()));
    }
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let output = spectrum_of(&checkpoint, cfg)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let value = serde_json::to_value(&output)?;
    std::fs::write(out, canonical_json(&value) + "\n")?;
    Ok(output)
}
