//! Fixed points of the kernel map, χ* evaluation, critical lines and points,
//! correlation lengths, and the critical exponent ζ.

use crate::activations::{closed, Activation, MomentKind};
use crate::error::{domain, invalid, Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::meanfield::{chi_jacobian, kernel_step, trace, Hyper, NormMode};

/// Kernels below this are reported as an exact zero fixed point.
pub const ZERO_FLOOR: f64 = 1e-14;
/// Default Picard tolerance, relative to max(1, K).
pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 100_000;

const OVERFLOW: f64 = 1e300;
// A kernel still growing past this after the iteration budget is treated as
// diverging (polynomial growth never reaches OVERFLOW in time).
const RUNAWAY: f64 = 1e8;
const NEWTON_MAX: usize = 500;

/// Result of iterating the kernel map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPoint {
    /// K*; `f64::INFINITY` when the kernel diverges.
    pub k_star: f64,
    /// ∂K^{l+1}/∂K^l at K*.
    pub chi_k_star: f64,
    /// χ_J at K*.
    pub chi_j_star: f64,
    pub converged: bool,
    pub diverged: bool,
    pub iterations: usize,
}

/// A solution of χ* = 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticalLinePoint {
    pub sigma_w: f64,
    pub sigma_b: f64,
    /// |χ* − 1| at the solution.
    pub residual: f64,
    pub k_star: f64,
    /// Slope of the kernel map at K*; above 1 the fixed point repels.
    pub chi_k_star: f64,
    /// The variances the solver worked with; exact where σ_w² is.
    pub hyper: Hyper,
}

impl CriticalLinePoint {
    fn new(hyper: Hyper, residual: f64, k_star: f64, chi_k_star: f64) -> Self {
        CriticalLinePoint { sigma_w: hyper.sigma_w(), sigma_b: hyper.sigma_b(), residual, k_star, chi_k_star, hyper }
    }

    pub fn hyper(&self) -> Hyper {
        self.hyper
    }
}

fn kernel_slope_fd(act: Activation, mode: NormMode, hp: Hyper, k: f64) -> f64 {
    let h = 1e-5 * k.max(1e-3);
    let f = |x| kernel_step(act, mode, hp, x);
    if k > h {
        (f(k + h) - f(k - h)) / (2.0 * h)
    } else {
        (-3.0 * f(k) + 4.0 * f(k + h) - f(k + 2.0 * h)) / (2.0 * h)
    }
}

fn finish(act: Activation, mode: NormMode, hp: Hyper, k: f64, converged: bool, iterations: usize) -> Result<FixedPoint> {
    Ok(FixedPoint {
        k_star: k,
        chi_k_star: kernel_slope_fd(act, mode, hp, k),
        chi_j_star: chi_jacobian(act, mode, hp, k)?,
        converged,
        diverged: false,
        iterations,
    })
}

fn diverged(act: Activation, hp: Hyper, iterations: usize) -> FixedPoint {
    FixedPoint {
        k_star: f64::INFINITY,
        chi_k_star: f64::INFINITY,
        chi_j_star: hp.weight_var * act.dphi2_limit(),
        converged: false,
        diverged: true,
        iterations,
    }
}

/// Iterates the kernel map from `k_init` until the residual
/// |step(K) − K| is at most `tol`·max(1, K).
///
/// Slow, near-marginal convergence is finished with Newton steps on
/// step(K) − K. A kernel that falls below [`ZERO_FLOOR`] with σ_b = 0 is
/// reported as exactly zero.
pub fn find_fixed_point(
    act: Activation,
    mode: NormMode,
    hp: Hyper,
    k_init: f64,
    max_iter: usize,
    tol: f64,
) -> Result<FixedPoint> {
    hp.validate()?;
    if !(k_init.is_finite() && k_init >= 0.0) {
        return Err(domain(format!("initial kernel must be finite and nonnegative, got {k_init}")));
    }
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    match mode {
        NormMode::PostLn => return finish(act, mode, hp, hp.weight_var + hp.bias_var, true, 0),
        NormMode::PreLn => return finish(act, mode, hp, kernel_step(act, mode, hp, k_init), true, 1),
        NormMode::Vanilla => {}
    }
    if let Activation::ScaleInvariant { .. } = act {
        let gain = hp.weight_var * closed(act, MomentKind::DPhi2, 1.0);
        return if gain < 1.0 {
            finish(act, mode, hp, hp.bias_var / (1.0 - gain), true, 0)
        } else if gain == 1.0 && hp.bias_var == 0.0 {
            finish(act, mode, hp, k_init, true, 0)
        } else {
            Ok(diverged(act, hp, 0))
        };
    }

    let step = |k: f64| kernel_step(act, mode, hp, k);
    let zero_ok = hp.bias_var == 0.0;
    let done = |k: f64, f: f64, rho: f64| {
        let scale = tol * k.max(1.0);
        f.abs() <= scale && rho < 1.0 && f.abs() / (1.0 - rho) <= scale
    };

    let mut k = k_init;
    let mut iterations = 0;
    while iterations < max_iter {
        let next = step(k);
        iterations += 1;
        if !next.is_finite() || next > OVERFLOW {
            return Ok(diverged(act, hp, iterations));
        }
        let f = next - k;
        k = next;
        if zero_ok && k < ZERO_FLOOR {
            return finish(act, mode, hp, 0.0, true, iterations);
        }
        if done(k, f, hp.weight_var * act.phi2_slope(k)) {
            let k = if zero_ok && k <= tol { 0.0 } else { k };
            return finish(act, mode, hp, k, true, iterations);
        }
    }

    // Newton polish for near-marginal maps, accepted only while it keeps
    // reducing the residual.
    let mut best = k;
    let mut best_res = (step(k) - k).abs();
    for _ in 0..NEWTON_MAX {
        let f = step(best) - best;
        let fp = hp.weight_var * act.phi2_slope(best) - 1.0;
        if fp == 0.0 {
            break;
        }
        let mut cand = best - f / fp;
        if cand < 0.0 {
            cand = 0.5 * best;
        }
        iterations += 1;
        if zero_ok && cand < ZERO_FLOOR {
            return finish(act, mode, hp, 0.0, true, iterations);
        }
        let res = (step(cand) - cand).abs();
        if res > best_res || cand == best {
            break;
        }
        best = cand;
        best_res = res;
        if (f / fp).abs() <= tol * best.max(1.0) {
            break;
        }
    }
    let growing = step(best) > best;
    if growing && best > RUNAWAY {
        return Ok(diverged(act, hp, iterations));
    }
    let converged = best_res <= tol * best.max(1.0);
    let best = if converged && zero_ok && best <= tol { 0.0 } else { best };
    finish(act, mode, hp, best, converged, iterations)
}

/// [`find_fixed_point`] with the default budget and tolerance.
pub fn fixed_point(act: Activation, mode: NormMode, hp: Hyper, k_init: f64) -> Result<FixedPoint> {
    find_fixed_point(act, mode, hp, k_init, DEFAULT_MAX_ITER, DEFAULT_TOL)
}

/// χ_J at the fixed point reached from `k_init`.
///
/// A diverging vanilla kernel yields the large-K limit σ_w²·lim⟨φ′²⟩.
pub fn chi_star(act: Activation, mode: NormMode, hp: Hyper, k_init: f64) -> Result<f64> {
    let fp = fixed_point(act, mode, hp, k_init)?;
    if fp.diverged || fp.converged {
        Ok(fp.chi_j_star)
    } else {
        Err(Error::NoFixedPoint(format!(
            "{act} {mode} {hp:?}: kernel iteration stalled at K = {}",
            fp.k_star
        )))
    }
}

/// Critical-line point through a given fixed-point kernel for a vanilla
/// network: σ_w² = 1/⟨φ′²⟩(K*), σ_b² = K* − σ_w²⟨φ²⟩(K*). Returns `None`
/// when σ_b² would be negative.
pub fn line_point_from_kernel(act: Activation, k_star: f64) -> Option<CriticalLinePoint> {
    let w = 1.0 / closed(act, MomentKind::DPhi2, k_star);
    let b = k_star - w * closed(act, MomentKind::Phi2, k_star);
    if !(w.is_finite() && b >= -1e-12 * k_star.max(1.0)) {
        return None;
    }
    let b = b.max(0.0);
    let residual = (w * closed(act, MomentKind::DPhi2, k_star) - 1.0).abs();
    Some(CriticalLinePoint::new(Hyper::from_variances(w, b), residual, k_star, w * act.phi2_slope(k_star)))
}

fn bisect(mut lo: f64, mut hi: f64, mut f_lo: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (f_lo < 0.0) {
            lo = mid;
            f_lo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Default kernel grid for scans over K*.
pub fn default_kernel_grid() -> Vec<f64> {
    let n = 4000;
    (0..n).map(|i| 10f64.powf(-8.0 + 14.0 * i as f64 / (n - 1) as f64)).collect()
}

// Every K* on the grid where σ_w²⟨φ′²⟩(K*) = 1 with σ_b² ≥ 0.
fn parametric_line_points(act: Activation, sigma_w: f64, grid: &[f64]) -> Vec<CriticalLinePoint> {
    let target = 1.0 / (sigma_w * sigma_w);
    let g = |k: f64| closed(act, MomentKind::DPhi2, k) - target;
    let at = |k: f64| {
        let w = sigma_w * sigma_w;
        let b = k - w * closed(act, MomentKind::Phi2, k);
        (b >= 0.0).then(|| {
            let residual = (w * closed(act, MomentKind::DPhi2, k) - 1.0).abs();
            CriticalLinePoint::new(Hyper::from_variances(w, b), residual, k, w * act.phi2_slope(k))
        })
    };
    let mut out = Vec::new();
    if g(0.0) == 0.0 {
        out.extend(at(0.0));
    }
    let mut prev = (0.0, g(0.0));
    for &k in grid {
        let gk = g(k);
        if gk == 0.0 {
            out.extend(at(k));
        } else if prev.1 != 0.0 && (gk < 0.0) != (prev.1 < 0.0) {
            let root = bisect(prev.0, k, prev.1, 1e-15 * k, g);
            out.extend(at(root));
        }
        prev = (k, gk);
    }
    out
}

/// Vanilla critical line parametrized by the fixed-point kernel:
/// σ_w² = 1/⟨φ′²⟩(K*), σ_b² = K* − σ_w²⟨φ²⟩(K*). Kernels that would need
/// σ_b² < 0 are skipped.
pub fn critical_line_parametric(act: Activation, kernels: &[f64]) -> Vec<CriticalLinePoint> {
    kernels.iter().filter_map(|&k| line_point_from_kernel(act, k)).collect()
}

/// Solves χ*(σ_w, σ_b) = 1 for σ_b ≥ 0 by bracketing on [0, 10σ_w]
/// (expanded geometrically) and bisection to `tol`. Fixed points are
/// iterated from `k_init`.
pub fn solve_sigma_b(act: Activation, mode: NormMode, sigma_w: f64, k_init: f64, tol: f64) -> Option<CriticalLinePoint> {
    let g = |sb: f64| chi_star(act, mode, Hyper::new(sigma_w, sb), k_init).map(|c| c - 1.0).unwrap_or(f64::NAN);
    let g0 = g(0.0);
    if !g0.is_finite() {
        return None;
    }
    let solved = |sb: f64| {
        let hp = Hyper::new(sigma_w, sb);
        let fp = fixed_point(act, mode, hp, k_init).ok()?;
        let residual = (fp.chi_j_star - 1.0).abs();
        Some(CriticalLinePoint::new(hp, residual, fp.k_star, fp.chi_k_star))
    };
    if g0.abs() <= 1e-12 {
        return solved(0.0);
    }
    let mut hi = 10.0 * sigma_w.max(1e-3);
    for _ in 0..12 {
        let gh = g(hi);
        if gh.is_finite() && (gh < 0.0) != (g0 < 0.0) {
            let sb = bisect(0.0, hi, g0, tol, g);
            return solved(sb);
        }
        hi *= 2.0;
    }
    None
}

/// All critical points found at one σ_w.
#[derive(Clone, Debug, PartialEq)]
pub struct LineScan {
    pub sigma_w: f64,
    /// Empty when no σ_b ≥ 0 gives χ* = 1.
    pub points: Vec<CriticalLinePoint>,
}

/// Critical σ_b for every σ_w in `sweep`.
///
/// Vanilla GELU is solved through the fixed-point kernel, because along its
/// line σ_w is not monotone in K* and a single σ_w can carry two solutions.
/// Every other case bisects on σ_b with fixed points iterated from K = 1.
pub fn critical_line(act: Activation, mode: NormMode, sweep: &[f64], tol: f64) -> Vec<LineScan> {
    critical_line_with(act, mode, sweep, tol, Execution::default())
}

pub fn critical_line_with(act: Activation, mode: NormMode, sweep: &[f64], tol: f64, exec: Execution) -> Vec<LineScan> {
    let grid = default_kernel_grid();
    map_indexed(exec, sweep.len(), |i| {
        let sigma_w = sweep[i];
        let points = if !(sigma_w.is_finite() && sigma_w > 0.0) {
            Vec::new()
        } else if (act, mode) == (Activation::Gelu, NormMode::Vanilla) {
            parametric_line_points(act, sigma_w, &grid)
        } else {
            solve_sigma_b(act, mode, sigma_w, 1.0, tol).into_iter().collect()
        };
        LineScan { sigma_w, points }
    })
}

/// Points where χ_J* = 1 and χ_K* = 1 hold together (vanilla only).
pub fn critical_point(act: Activation, mode: NormMode) -> Result<Vec<CriticalLinePoint>> {
    critical_point_on(act, mode, &default_kernel_grid())
}

/// [`critical_point`] scanning the given increasing grid of K* > 0; K* = 0
/// is always checked.
pub fn critical_point_on(act: Activation, mode: NormMode, grid: &[f64]) -> Result<Vec<CriticalLinePoint>> {
    if mode != NormMode::Vanilla {
        return Err(invalid("normalized networks have critical lines, not points"));
    }
    if let Activation::ScaleInvariant { .. } = act {
        // Every K is a fixed point at σ_b = 0; 0 is reported.
        let w = 1.0 / closed(act, MomentKind::DPhi2, 1.0);
        return Ok(vec![CriticalLinePoint::new(Hyper::from_variances(w, 0.0), 0.0, 0.0, 1.0)]);
    }
    let r = |k: f64| act.phi2_slope(k) / closed(act, MomentKind::DPhi2, k) - 1.0;
    let mut out = Vec::new();
    if r(0.0).abs() <= 1e-12 {
        out.extend(line_point_from_kernel(act, 0.0));
    }
    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (ra, rb) = (r(a), r(b));
        if ra == 0.0 {
            out.extend(line_point_from_kernel(act, a));
        } else if (ra < 0.0) != (rb < 0.0) && rb != 0.0 {
            let k = bisect(a, b, ra, 1e-15 * b, r);
            out.extend(line_point_from_kernel(act, k));
        }
    }
    Ok(out)
}

/// ξ = 1/|ln χ|; infinite at χ = 1.
pub fn correlation_length(chi: f64) -> Result<f64> {
    if !(chi > 0.0) {
        return Err(domain(format!("correlation length needs χ > 0, got {chi}")));
    }
    if chi == 1.0 {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / chi.ln().abs())
}

/// Numerical critical exponent from a critical trace.
#[derive(Clone, Debug, PartialEq)]
pub struct ExponentEstimate {
    /// Mean of l·(1 − χ^l) over the window.
    pub zeta: f64,
    /// l·(1 − χ^l) at the last layer.
    pub zeta_last: f64,
    /// Mean of l·(K^l − K*) over the window.
    pub kernel_amplitude: f64,
    pub k_star: f64,
    pub window: (usize, usize),
}

/// Largest |χ* − 1| accepted as critical by [`exponent_numeric`].
pub const CRITICAL_TOL: f64 = 1e-6;

/// Estimates ζ in χ^l ≈ 1 − ζ/l by running a trace from K¹ = `k1` at a
/// critical configuration and averaging l·(1 − χ^l) over l ∈ [fit_from, depth].
pub fn exponent_numeric(
    act: Activation,
    mode: NormMode,
    hp: Hyper,
    k1: f64,
    depth: usize,
    fit_from: usize,
) -> Result<ExponentEstimate> {
    if fit_from < 1 || depth < 2 * fit_from {
        return Err(invalid(format!("need 1 ≤ fit_from and depth ≥ 2·fit_from, got {fit_from}, {depth}")));
    }
    let fp = fixed_point(act, mode, hp, k1)?;
    if fp.diverged || !fp.converged || (fp.chi_j_star - 1.0).abs() > CRITICAL_TOL {
        return Err(invalid(format!(
            "{act} {mode} at σ_w = {}, σ_b = {} is not critical (χ* = {})",
            hp.sigma_w(),
            hp.sigma_b(),
            fp.chi_j_star
        )));
    }
    let t = trace(act, mode, hp, depth, k1, 0)?;
    if t.layers() < depth {
        return Err(invalid("trace diverged before reaching the requested depth"));
    }
    let window = fit_from..=depth;
    let n = window.clone().count() as f64;
    let zeta = window.clone().map(|l| l as f64 * (1.0 - t.chi_j[l - 1])).sum::<f64>() / n;
    let kernel_amplitude = window.clone().map(|l| l as f64 * (t.kernel[l - 1] - fp.k_star)).sum::<f64>() / n;
    Ok(ExponentEstimate {
        zeta,
        zeta_last: depth as f64 * (1.0 - t.chi_j[depth - 1]),
        kernel_amplitude,
        k_star: fp.k_star,
        window: (fit_from, depth),
    })
}
