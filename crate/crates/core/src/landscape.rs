//! Two-parameter toy loss landscapes built from Gaussian bumps.
//!
//! Each group's loss is `max f - f(theta)` for a bivariate Gaussian density
//! `f`. The sharpness-aware objective perturbs `theta` by the point of the
//! closed `rho`-ball that maximizes the mean group loss, found by brute force
//! over a polar grid, and reports the worst group loss there.

use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSurface {
    pub mu: Point,
    pub sigma: [[f64; 2]; 2],
}

impl GaussianSurface {
    pub fn new(mu: Point, sigma: [[f64; 2]; 2]) -> Result<Self> {
        let s = Self { mu, sigma };
        s.validate()?;
        Ok(s)
    }

    pub fn diagonal(mu: Point, s11: f64, s22: f64) -> Self {
        Self {
            mu,
            sigma: [[s11, 0.0], [0.0, s22]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [[a, b], [c, d]] = self.sigma;
        if (b - c).abs() > 1e-12 * (1.0 + b.abs()) {
            return Err(Error::InvalidArgument("covariance must be symmetric".into()));
        }
        if !(a > 0.0 && d > 0.0 && self.det() > 0.0) {
            return Err(Error::InvalidArgument(
                "covariance must be positive definite".into(),
            ));
        }
        Ok(())
    }

    pub fn det(&self) -> f64 {
        let [[a, b], [c, d]] = self.sigma;
        a * d - b * c
    }

    /// Peak density `1 / (2 pi sqrt|Sigma|)`.
    pub fn peak(&self) -> f64 {
        1.0 / (2.0 * PI * self.det().sqrt())
    }

    fn mahalanobis_sq(&self, theta: Point) -> f64 {
        let [[a, b], [c, d]] = self.sigma;
        let det = self.det();
        let x = theta[0] - self.mu[0];
        let y = theta[1] - self.mu[1];
        // inverse = [[d, -b], [-c, a]] / det
        (d * x * x - (b + c) * x * y + a * y * y) / det
    }

    pub fn density(&self, theta: Point) -> f64 {
        self.peak() * (-0.5 * self.mahalanobis_sq(theta)).exp()
    }

    /// `max f - f(theta)`; zero exactly at the mean.
    pub fn loss(&self, theta: Point) -> f64 {
        self.peak() * -(-0.5 * self.mahalanobis_sq(theta)).exp_m1()
    }
}

pub fn surface_density(s: &GaussianSurface, theta: Point) -> f64 {
    s.density(theta)
}

pub fn group_loss(s: &GaussianSurface, theta: Point) -> f64 {
    s.loss(theta)
}

/// Named toy setups with identical numbers of points per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScenario {
    pub surfaces: Vec<GaussianSurface>,
    pub rho: f64,
}

pub const TOY_RHO: f64 = 0.6;

impl ToyScenario {
    /// Group 2 is sharp along the second axis.
    pub fn a1() -> Self {
        Self {
            surfaces: vec![
                GaussianSurface::diagonal([-2.0, 0.0], 1.5, 2.0),
                GaussianSurface::diagonal([2.0, 0.0], 1.5, 0.05),
            ],
            rho: TOY_RHO,
        }
    }

    /// Both groups are flat.
    pub fn a2() -> Self {
        Self {
            surfaces: vec![
                GaussianSurface::diagonal([-2.0, 0.0], 1.5, 2.0),
                GaussianSurface::diagonal([2.0, 0.0], 1.5, 2.0),
            ],
            rho: TOY_RHO,
        }
    }

    pub fn by_id(id: &str) -> Result<Self> {
        match id {
            "a1" | "a-1" => Ok(Self::a1()),
            "a2" | "a-2" => Ok(Self::a2()),
            other => Err(Error::Config(format!("unknown toy scenario `{other}`"))),
        }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn group_losses(&self, theta: Point) -> Vec<f64> {
        self.surfaces.iter().map(|s| s.loss(theta)).collect()
    }
}

pub fn erm_objective(scenario: &ToyScenario, theta: Point) -> f64 {
    let n = scenario.surfaces.len() as f64;
    scenario.surfaces.iter().map(|s| s.loss(theta)).sum::<f64>() / n
}

pub fn gdro_objective(scenario: &ToyScenario, theta: Point) -> f64 {
    scenario
        .surfaces
        .iter()
        .map(|s| s.loss(theta))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Polar-grid resolution for the brute-force ascent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallGrid {
    pub n_angles: usize,
    pub n_radii: usize,
}

impl Default for BallGrid {
    fn default() -> Self {
        Self {
            n_angles: 64,
            n_radii: 16,
        }
    }
}

/// Perturbation in the closed `rho`-ball maximizing the mean group loss.
///
/// Candidates are radii `rho * k / n_radii` for `k = 1..=n_radii` at
/// `n_angles` equally spaced angles; the first maximum wins ties.
pub fn erm_ascent(scenario: &ToyScenario, theta: Point, grid: BallGrid) -> Point {
    if scenario.rho == 0.0 {
        return [0.0, 0.0];
    }
    let mut best = [0.0, 0.0];
    let mut best_val = f64::NEG_INFINITY;
    for k in 1..=grid.n_radii {
        let r = scenario.rho * k as f64 / grid.n_radii as f64;
        for a in 0..grid.n_angles {
            let phi = 2.0 * PI * a as f64 / grid.n_angles as f64;
            let eps = [r * phi.cos(), r * phi.sin()];
            let v = erm_objective(scenario, [theta[0] + eps[0], theta[1] + eps[1]]);
            if v > best_val {
                best_val = v;
                best = eps;
            }
        }
    }
    best
}

/// Worst group loss at the mean-loss-maximizing point of the `rho`-ball.
pub fn asgdro_objective(
    scenario: &ToyScenario,
    theta: Point,
    n_angles: usize,
    n_radii: usize,
) -> Result<f64> {
    if n_angles < 16 || n_radii < 4 {
        return Err(Error::InvalidArgument(format!(
            "ball grid too coarse: {n_angles} angles, {n_radii} radii (need >= 16, >= 4)"
        )));
    }
    Ok(asgdro_objective_on(scenario, theta, BallGrid { n_angles, n_radii }))
}

pub(crate) fn asgdro_objective_on(scenario: &ToyScenario, theta: Point, grid: BallGrid) -> f64 {
    let eps = erm_ascent(scenario, theta, grid);
    gdro_objective(scenario, [theta[0] + eps[0], theta[1] + eps[1]])
}

/// Which field of a scenario to scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveId {
    Group1,
    Group2,
    Erm,
    Gdro,
    Asgdro,
}

impl std::str::FromStr for ObjectiveId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "group1" => Ok(Self::Group1),
            "group2" => Ok(Self::Group2),
            "erm" => Ok(Self::Erm),
            "gdro" => Ok(Self::Gdro),
            "asgdro" => Ok(Self::Asgdro),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

impl ObjectiveId {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Group1 => "group1",
            Self::Group2 => "group2",
            Self::Erm => "erm",
            Self::Gdro => "gdro",
            Self::Asgdro => "asgdro",
        }
    }

    pub fn evaluate(self, scenario: &ToyScenario, theta: Point, grid: BallGrid) -> f64 {
        match self {
            Self::Group1 => scenario.surfaces[0].loss(theta),
            Self::Group2 => scenario.surfaces[1].loss(theta),
            Self::Erm => erm_objective(scenario, theta),
            Self::Gdro => gdro_objective(scenario, theta),
            Self::Asgdro => asgdro_objective_on(scenario, theta, grid),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub theta1_min: f64,
    pub theta1_max: f64,
    pub theta2_min: f64,
    pub theta2_max: f64,
}

impl Bounds {
    pub fn square(half_width: f64) -> Self {
        Self {
            theta1_min: -half_width,
            theta1_max: half_width,
            theta2_min: -half_width,
            theta2_max: half_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Argmin {
    pub theta1: f64,
    pub theta2: f64,
    pub value: f64,
    pub row: usize,
    pub col: usize,
}

/// Objective values at cell centers, row-major with rows along `theta2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScan {
    pub bounds: Bounds,
    pub resolution: usize,
    pub values: Vec<f64>,
    pub argmin: Argmin,
}

impl GridScan {
    pub fn center(&self, row: usize, col: usize) -> Point {
        cell_center(&self.bounds, self.resolution, row, col)
    }

    /// True when the minimizing cell does not touch the scan boundary.
    pub fn argmin_is_interior(&self) -> bool {
        let last = self.resolution - 1;
        self.argmin.row != 0 && self.argmin.row != last && self.argmin.col != 0 && self.argmin.col != last
    }

    /// CSV with header `theta1,theta2,value`, one line per cell in row-major order.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "theta1,theta2,value")?;
        for row in 0..self.resolution {
            for col in 0..self.resolution {
                let [t1, t2] = self.center(row, col);
                writeln!(out, "{t1},{t2},{}", self.values[row * self.resolution + col])?;
            }
        }
        Ok(())
    }
}

fn cell_center(b: &Bounds, res: usize, row: usize, col: usize) -> Point {
    let w1 = (b.theta1_max - b.theta1_min) / res as f64;
    let w2 = (b.theta2_max - b.theta2_min) / res as f64;
    [
        b.theta1_min + (col as f64 + 0.5) * w1,
        b.theta2_min + (row as f64 + 0.5) * w2,
    ]
}

/// Evaluates `objective` at every cell center; the argmin takes the lowest
/// row-major index among ties.
pub fn grid_scan<F>(objective: F, bounds: Bounds, resolution: usize) -> Result<GridScan>
where
    F: Fn(Point) -> f64 + Sync,
{
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!(
            "resolution must be >= 2, got {resolution}"
        )));
    }
    if !(bounds.theta1_min < bounds.theta1_max && bounds.theta2_min < bounds.theta2_max) {
        return Err(Error::InvalidArgument("bounds must be ordered".into()));
    }
    let values: Vec<f64> = (0..resolution * resolution)
        .into_par_iter()
        .map(|idx| objective(cell_center(&bounds, resolution, idx / resolution, idx % resolution)))
        .collect();
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    let (row, col) = (best / resolution, best % resolution);
    let [theta1, theta2] = cell_center(&bounds, resolution, row, col);
    Ok(GridScan {
        bounds,
        resolution,
        argmin: Argmin {
            theta1,
            theta2,
            value: values[best],
            row,
            col,
        },
        values,
    })
}

/// Scans one objective of a scenario.
pub fn scan_objective(
    scenario: &ToyScenario,
    objective: ObjectiveId,
    bounds: Bounds,
    resolution: usize,
    grid: BallGrid,
) -> Result<GridScan> {
    if objective == ObjectiveId::Group2 && scenario.surfaces.len() < 2 {
        return Err(Error::InvalidArgument("scenario has a single group".into()));
    }
    grid_scan(|t| objective.evaluate(scenario, t, grid), bounds, resolution)
}
