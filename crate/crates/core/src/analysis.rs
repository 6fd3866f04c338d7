//! Fits of J-versus-depth series and phase-diagram grids.
//!
//! Series are (layer, value) pairs from a theory trace or an ensemble
//! profile. Fits are ordinary least squares on log-transformed values over
//! the layers strictly above `l_min`.

use crate::activations::Activation;
use crate::critical::chi_star;
use crate::ensemble::JacobianEstimate;
use crate::error::{domain, invalid, Result};
use crate::exec::{map_indexed, Execution};
use crate::meanfield::{Hyper, MeanFieldTrace, NormMode};

/// Fewest points a fit accepts.
pub const MIN_FIT_POINTS: usize = 10;
/// Exponential slopes smaller than this count as flat: infinite ξ.
pub const FLAT_SLOPE: f64 = 1e-12;

/// Least-squares line y = slope·x + intercept.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub stderr_slope: f64,
    /// First and last layer used.
    pub window: (usize, usize),
    pub r_squared: f64,
}

/// Sign of the exponential trend.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// J decays with depth.
    Ordered,
    Critical,
    /// J grows with depth.
    Chaotic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExponentialFit {
    pub fit: FitResult,
    /// 1/|slope|, infinite for a flat series.
    pub xi: f64,
    pub phase: Phase,
}

/// J^{l0,l} of a theory trace as (l, J) pairs.
pub fn trace_series(trace: &MeanFieldTrace) -> Vec<(usize, f64)> {
    trace.jacobian.iter().enumerate().map(|(i, &j)| (trace.l0 + 1 + i, j)).collect()
}

/// Ensemble means of a measured profile as (l, J) pairs; empty when the
/// estimate has no per-layer data.
pub fn estimate_series(est: &JacobianEstimate) -> Vec<(usize, f64)> {
    est.per_layer
        .iter()
        .flatten()
        .enumerate()
        .map(|(i, e)| (est.l0 + 1 + i, e.mean))
        .collect()
}

fn window(series: &[(usize, f64)], l_min: usize) -> Result<Vec<(usize, f64)>> {
    let pts: Vec<_> = series.iter().copied().filter(|&(l, _)| l > l_min).collect();
    if pts.len() < MIN_FIT_POINTS {
        return Err(invalid(format!(
            "fit needs at least {MIN_FIT_POINTS} points above layer {l_min}, found {}",
            pts.len()
        )));
    }
    if let Some(&(l, v)) = pts.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
        return Err(domain(format!("value at layer {l} is {v}; fits need positive finite values")));
    }
    Ok(pts)
}

fn ols(xs: &[f64], ys: &[f64], window: (usize, usize)) -> FitResult {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if syy > 0.0 { (1.0 - sse / syy).clamp(0.0, 1.0) } else { 1.0 };
    FitResult { slope, intercept, stderr_slope: (sse / (n - 2.0) / sxx).sqrt(), window, r_squared }
}

/// Fits ln J = slope·ln l + c; the slope estimates −ζ.
pub fn fit_power_law(series: &[(usize, f64)], l_min: usize) -> Result<FitResult> {
    let pts = window(series, l_min)?;
    let xs: Vec<f64> = pts.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    Ok(ols(&xs, &ys, (pts[0].0, pts[pts.len() - 1].0)))
}

/// Fits ln J = slope·l + c; ξ = 1/|slope|.
pub fn fit_exponential(series: &[(usize, f64)], l_min: usize) -> Result<ExponentialFit> {
    let pts = window(series, l_min)?;
    let xs: Vec<f64> = pts.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let fit = ols(&xs, &ys, (pts[0].0, pts[pts.len() - 1].0));
    let (xi, phase) = if fit.slope.abs() < FLAT_SLOPE {
        (f64::INFINITY, Phase::Critical)
    } else if fit.slope < 0.0 {
        (-1.0 / fit.slope, Phase::Ordered)
    } else {
        (1.0 / fit.slope, Phase::Chaotic)
    };
    Ok(ExponentialFit { fit, xi, phase })
}

/// `n` evenly spaced values from `min` to `max` inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl GridAxis {
    pub fn new(min: f64, max: f64, n: usize) -> Self {
        GridAxis { min, max, n }
    }

    pub fn values(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.min];
        }
        let step = (self.max - self.min) / (self.n - 1) as f64;
        (0..self.n).map(|i| self.min + step * i as f64).collect()
    }
}

/// χ* over a (σ_w, σ_b) grid. Cells without a finite χ* hold +∞.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseGrid {
    pub act: Activation,
    pub mode: NormMode,
    pub sigma_w: Vec<f64>,
    pub sigma_b: Vec<f64>,
    /// Row-major, one row per σ_w.
    pub chi: Vec<f64>,
}

/// A point where the grid crosses χ* = 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContourPoint {
    pub sigma_w: f64,
    pub sigma_b: f64,
}

impl PhaseGrid {
    pub fn get(&self, i_w: usize, i_b: usize) -> f64 {
        self.chi[i_w * self.sigma_b.len() + i_b]
    }

    pub fn is_diverged(&self, i_w: usize, i_b: usize) -> bool {
        self.get(i_w, i_b).is_infinite()
    }

    /// Crossings of χ* = 1, linearly interpolated along σ_b at every σ_w
    /// and along σ_w at every σ_b. Diverged cells are skipped.
    pub fn contour(&self) -> Vec<ContourPoint> {
        let (nw, nb) = (self.sigma_w.len(), self.sigma_b.len());
        let mut out = Vec::new();
        let mut edge = |a: (f64, f64, f64), b: (f64, f64, f64)| {
            let (fa, fb) = (a.2 - 1.0, b.2 - 1.0);
            if !(fa.is_finite() && fb.is_finite()) {
                return;
            }
            if fa == 0.0 {
                out.push(ContourPoint { sigma_w: a.0, sigma_b: a.1 });
            } else if fa * fb < 0.0 {
                let t = fa / (fa - fb);
                out.push(ContourPoint { sigma_w: a.0 + t * (b.0 - a.0), sigma_b: a.1 + t * (b.1 - a.1) });
            }
        };
        let cell = |i: usize, j: usize| (self.sigma_w[i], self.sigma_b[j], self.get(i, j));
        for i in 0..nw {
            for j in 0..nb {
                if j + 1 < nb {
                    edge(cell(i, j), cell(i, j + 1));
                }
                if i + 1 < nw {
                    edge(cell(i, j), cell(i + 1, j));
                }
            }
        }
        out
    }
}

/// χ* at every grid node, with fixed points iterated from K = 1.
pub fn phase_grid(act: Activation, mode: NormMode, sigma_w: GridAxis, sigma_b: GridAxis) -> Result<PhaseGrid> {
    phase_grid_with(act, mode, sigma_w, sigma_b, Execution::default())
}

pub fn phase_grid_with(act: Activation, mode: NormMode, sigma_w: GridAxis, sigma_b: GridAxis, exec: Execution) -> Result<PhaseGrid> {
    for axis in [sigma_w, sigma_b] {
        if axis.n == 0 || !(axis.min.is_finite() && axis.max.is_finite() && axis.min >= 0.0 && axis.max >= axis.min) {
            return Err(invalid(format!("bad grid axis {axis:?}")));
        }
    }
    let ws = sigma_w.values();
    let bs = sigma_b.values();
    let rows = map_indexed(exec, ws.len(), |i| {
        bs.iter()
            .map(|&b| match chi_star(act, mode, Hyper::new(ws[i], b), 1.0) {
                Ok(c) if c.is_finite() => c,
                _ => f64::INFINITY,
            })
            .collect::<Vec<_>>()
    });
    Ok(PhaseGrid { act, mode, sigma_w: ws, sigma_b: bs, chi: rows.concat() })
}
