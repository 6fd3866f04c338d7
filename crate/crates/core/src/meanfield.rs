//! Infinite-width recursions for the kernel K^l, the Jacobian multiplier
//! χ_J^l, the correction coefficient χ_Δ^l, partial Jacobians J^{l0,l}, and
//! the NTK Θ^l.
//!
//! Networks use the NTK parametrization
//! h^{l+1} = σ_w/√N_l · W φ(h^l) + σ_b b with W, b ~ N(0, 1).
//! The first layer sees the raw input, so K¹ = σ_w²‖x‖²/N₀ + σ_b² is supplied
//! by the caller. With layer normalization every hidden layer 1..L−1 is
//! normalized, either before the activation ([`NormMode::PreLn`]) or after it
//! ([`NormMode::PostLn`]).

use std::fmt;
use std::str::FromStr;

use crate::activations::{closed, Activation, MomentKind};
use crate::error::{domain, invalid, Error, Result};

/// Weight and bias variances σ_w², σ_b².
///
/// Variances are stored rather than standard deviations so that critical
/// values such as σ_w² = 2 are represented exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    pub weight_var: f64,
    pub bias_var: f64,
}

impl Hyper {
    pub fn new(sigma_w: f64, sigma_b: f64) -> Self {
        Hyper { weight_var: sigma_w * sigma_w, bias_var: sigma_b * sigma_b }
    }

    pub fn from_variances(weight_var: f64, bias_var: f64) -> Self {
        Hyper { weight_var, bias_var }
    }

    pub fn sigma_w(&self) -> f64 {
        self.weight_var.sqrt()
    }

    pub fn sigma_b(&self) -> f64 {
        self.bias_var.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.weight_var) && ok(self.bias_var) {
            Ok(())
        } else {
            Err(invalid(format!("hyperparameters must be finite and nonnegative: {self:?}")))
        }
    }
}

/// Where layer normalization sits in each hidden layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum NormMode {
    #[default]
    Vanilla,
    /// Normalize preactivations, then apply φ.
    PreLn,
    /// Apply φ, then normalize the activations.
    PostLn,
}

impl NormMode {
    pub const ALL: [NormMode; 3] = [NormMode::Vanilla, NormMode::PreLn, NormMode::PostLn];
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::Vanilla => "vanilla",
            NormMode::PreLn => "pre-ln",
            NormMode::PostLn => "post-ln",
        })
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(NormMode::Vanilla),
            "pre-ln" => Ok(NormMode::PreLn),
            "post-ln" => Ok(NormMode::PostLn),
            _ => Err(invalid(format!("unknown normalization mode '{s}'"))),
        }
    }
}

/// K^{l+1} as a function of K^l.
pub fn kernel_step(act: Activation, mode: NormMode, hp: Hyper, k: f64) -> f64 {
    match mode {
        NormMode::Vanilla => hp.weight_var * closed(act, MomentKind::Phi2, k) + hp.bias_var,
        NormMode::PreLn => hp.weight_var * closed(act, MomentKind::Phi2, 1.0) + hp.bias_var,
        NormMode::PostLn => hp.weight_var + hp.bias_var,
    }
}

/// Jacobian multiplier of hidden layer l given its kernel K^l, so that
/// J^{l0,l+1} = χ^l · J^{l0,l}.
pub fn chi_jacobian(act: Activation, mode: NormMode, hp: Hyper, k: f64) -> Result<f64> {
    match mode {
        NormMode::Vanilla => Ok(hp.weight_var * closed(act, MomentKind::DPhi2, k)),
        NormMode::PreLn => {
            if k <= 0.0 {
                return Err(domain("normalized layer has zero kernel"));
            }
            Ok(hp.weight_var * closed(act, MomentKind::DPhi2, 1.0) / k)
        }
        NormMode::PostLn => {
            let var = closed(act, MomentKind::Phi2, k) - closed(act, MomentKind::Phi1, k).powi(2);
            if var <= 0.0 {
                return Err(domain(format!("activation variance vanishes at K = {k}")));
            }
            Ok(hp.weight_var * closed(act, MomentKind::DPhi2, k) / var)
        }
    }
}

/// σ_w²·⟨φ″² + φ‴φ′⟩ at kernel `k`.
pub fn chi_delta(act: Activation, hp: Hyper, k: f64) -> f64 {
    hp.weight_var * closed(act, MomentKind::Delta, k)
}

/// Which kernel index enters the vanilla NTK recursion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NtkConvention {
    /// Θ^l = χ^{l−1}Θ^{l−1} + K^l, obtained by evaluating the last-layer
    /// parameter gradients directly.
    #[default]
    Derivation,
    /// Θ^l = χ^l Θ^{l−1} + K^{l−1}, the compact form often quoted.
    Boxed,
}

impl fmt::Display for NtkConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NtkConvention::Derivation => "derivation",
            NtkConvention::Boxed => "boxed",
        })
    }
}

impl FromStr for NtkConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "derivation" => Ok(NtkConvention::Derivation),
            "boxed" => Ok(NtkConvention::Boxed),
            _ => Err(invalid(format!("unknown NTK convention '{s}'"))),
        }
    }
}

/// Inputs to one step of the NTK recursion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NtkStep {
    /// Multiplier of Θ^{l−1}: χ, χ̃ or χ̄ depending on the mode.
    pub chi: f64,
    /// σ_w²⟨φ′²⟩ at unit kernel (PreLN only).
    pub chi_unit: f64,
    /// σ_w²⟨φ″² + φ‴φ′⟩ at unit kernel (PreLN only).
    pub chi_delta: f64,
    /// Additive kernel term.
    pub kernel: f64,
}

/// Θ^l from Θ^{l−1}.
///
/// With normalization the γ, β parameters of layer l−1 add 2χ_J + 2χ_Δ
/// (PreLN) or 2σ_w² (PostLN).
pub fn ntk_step(mode: NormMode, step: NtkStep, hp: Hyper, theta_prev: f64) -> f64 {
    let base = step.chi * theta_prev + step.kernel;
    match mode {
        NormMode::Vanilla => base,
        NormMode::PreLn => base + 2.0 * step.chi_unit + 2.0 * step.chi_delta,
        NormMode::PostLn => base + 2.0 * hp.weight_var,
    }
}

/// Limits applied while iterating a trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceOptions {
    /// A layer whose K, J or Θ exceeds this ends the trace as diverged.
    pub overflow: f64,
    /// Magnitudes below this are flushed to zero.
    pub floor: f64,
    pub ntk: NtkConvention,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions { overflow: 1e300, floor: 1e-300, ntk: NtkConvention::Derivation }
    }
}

/// Layer-by-layer infinite-width quantities. Layers are numbered from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldTrace {
    pub act: Activation,
    pub mode: NormMode,
    pub hyper: Hyper,
    pub l0: usize,
    pub kernel: Vec<f64>,
    pub chi_j: Vec<f64>,
    pub chi_delta: Vec<f64>,
    /// `jacobian[i]` is J^{l0, l0+1+i}.
    pub jacobian: Vec<f64>,
    pub theta: Vec<f64>,
    /// First layer that exceeded the overflow bound; the trace stops before it.
    pub diverged_at: Option<usize>,
}

impl MeanFieldTrace {
    /// Number of layers retained.
    pub fn layers(&self) -> usize {
        self.kernel.len()
    }

    pub fn k(&self, l: usize) -> Option<f64> {
        l.checked_sub(1).and_then(|i| self.kernel.get(i).copied())
    }

    pub fn chi(&self, l: usize) -> Option<f64> {
        l.checked_sub(1).and_then(|i| self.chi_j.get(i).copied())
    }

    /// J^{l0,l}; `None` for l ≤ l0 or beyond the trace.
    pub fn j(&self, l: usize) -> Option<f64> {
        l.checked_sub(self.l0 + 1).and_then(|i| self.jacobian.get(i).copied())
    }

    pub fn ntk(&self, l: usize) -> Option<f64> {
        l.checked_sub(1).and_then(|i| self.theta.get(i).copied())
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// Runs the recursions for `depth` layers starting from K¹ = `k1`.
pub fn trace(act: Activation, mode: NormMode, hp: Hyper, depth: usize, k1: f64, l0: usize) -> Result<MeanFieldTrace> {
    trace_with(act, mode, hp, depth, k1, l0, &TraceOptions::default())
}

pub fn trace_with(
    act: Activation,
    mode: NormMode,
    hp: Hyper,
    depth: usize,
    k1: f64,
    l0: usize,
    opts: &TraceOptions,
) -> Result<MeanFieldTrace> {
    hp.validate()?;
    if depth < 2 {
        return Err(invalid(format!("depth must be at least 2, got {depth}")));
    }
    if l0 >= depth {
        return Err(invalid(format!("l0 = {l0} must be below depth {depth}")));
    }
    if !(k1.is_finite() && k1 >= 0.0) {
        return Err(domain(format!("first-layer kernel must be finite and nonnegative, got {k1}")));
    }
    let flush = |v: f64| if v.abs() < opts.floor { 0.0 } else { v };
    let (chi_unit, delta_unit) = match mode {
        NormMode::PreLn => (
            hp.weight_var * closed(act, MomentKind::DPhi2, 1.0),
            chi_delta(act, hp, 1.0),
        ),
        _ => (0.0, 0.0),
    };
    let mut t = MeanFieldTrace {
        act,
        mode,
        hyper: hp,
        l0,
        kernel: Vec::with_capacity(depth),
        chi_j: Vec::with_capacity(depth),
        chi_delta: Vec::with_capacity(depth),
        jacobian: Vec::with_capacity(depth - l0),
        theta: Vec::with_capacity(depth),
        diverged_at: None,
    };
    let mut k = k1;
    for l in 1..=depth {
        if l > 1 {
            k = flush(kernel_step(act, mode, hp, k));
        }
        let chi = flush(chi_jacobian(act, mode, hp, k)?);
        let delta = match mode {
            NormMode::PreLn => delta_unit,
            _ => chi_delta(act, hp, k),
        };
        let theta = match t.theta.last() {
            None => k,
            Some(&prev) => {
                let chi_prev = *t.chi_j.last().unwrap();
                let step = match (mode, opts.ntk) {
                    (NormMode::Vanilla, NtkConvention::Boxed) => NtkStep {
                        chi,
                        chi_unit,
                        chi_delta: delta_unit,
                        kernel: *t.kernel.last().unwrap(),
                    },
                    _ => NtkStep { chi: chi_prev, chi_unit, chi_delta: delta_unit, kernel: k },
                };
                flush(ntk_step(mode, step, hp, prev))
            }
        };
        let jac = if l == l0 + 1 {
            Some(if l0 == 0 { hp.weight_var } else { t.chi_j[l0 - 1] })
        } else if l > l0 + 1 {
            Some(flush(t.chi_j[l - 2] * t.jacobian.last().unwrap()))
        } else {
            None
        };
        let bad = |v: f64| !v.is_finite() || v.abs() > opts.overflow;
        if bad(k) || bad(chi) || bad(theta) || jac.is_some_and(bad) {
            t.diverged_at = Some(l);
            break;
        }
        t.kernel.push(k);
        t.chi_j.push(chi);
        t.chi_delta.push(delta);
        t.theta.push(theta);
        if let Some(j) = jac {
            t.jacobian.push(j);
        }
    }
    Ok(t)
}

/// J^{0,l} including the O(1/N₀) correction from the input layer.
///
/// The first factor σ_w²χ¹ becomes σ_w²(χ¹ + 2σ_w²χ_Δ¹·q/N₀) where
/// q = ‖x‖²/N₀; the remaining factors come from the trace. Only defined for
/// un-normalized networks.
pub fn j0_corrected(trace: &MeanFieldTrace, n0: usize, input_norm: f64, l: usize) -> Result<f64> {
    if trace.mode != NormMode::Vanilla {
        return Err(invalid("input-layer correction is only derived for vanilla networks"));
    }
    if n0 == 0 {
        return Err(invalid("input dimension must be positive"));
    }
    if l < 2 || l > trace.layers() {
        return Err(invalid(format!("layer {l} outside 2..={}", trace.layers())));
    }
    let hp = trace.hyper;
    let first = trace.chi_j[0] + 2.0 * hp.weight_var / n0 as f64 * trace.chi_delta[0] * input_norm;
    let rest: f64 = trace.chi_j[1..l - 1].iter().product();
    Ok(hp.weight_var * first * rest)
}

/// J^{0,l} without the input-layer correction.
pub fn j0_uncorrected(trace: &MeanFieldTrace, l: usize) -> Result<f64> {
    if l < 1 || l > trace.layers() {
        return Err(invalid(format!("layer {l} outside 1..={}", trace.layers())));
    }
    Ok(trace.hyper.weight_var * trace.chi_j[..l - 1].iter().product::<f64>())
}
