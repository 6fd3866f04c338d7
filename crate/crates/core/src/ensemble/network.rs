//! Explicit finite-width networks: parameters, the forward pass, and exact
//! partial Jacobians by tangent propagation.
//!
//! Layer l maps a^{l−1} to h^l = σ_w/√N_{l−1} · W^l a^{l−1} + σ_b b^l with
//! a⁰ = x. Hidden layers 1..L−1 then produce a^l from h^l through φ and,
//! when enabled, normalization with gain γ and shift β. Normalization uses
//! the empirical mean and variance across the neurons of each group.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use super::rng::{normal_matrix, normal_vector, stream, Draw};
use crate::activations::Activation;
use crate::error::{invalid, Error, Result};
use crate::meanfield::{Hyper, NormMode};

/// Added to the empirical variance before taking the inverse square root.
pub const LN_EPS: f64 = 1e-12;

/// Where normalization sits and how many neuron groups it treats
/// separately. One group is LayerNorm, more is GroupNorm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Normalization {
    pub mode: NormMode,
    pub groups: usize,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mode: NormMode::Vanilla, groups: 1 }
    }
}

impl From<NormMode> for Normalization {
    fn from(mode: NormMode) -> Self {
        Normalization { mode, groups: 1 }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.groups == 1 {
            write!(f, "{}", self.mode)
        } else {
            write!(f, "{}/{}", self.mode, self.groups)
        }
    }
}

impl FromStr for Normalization {
    type Err = Error;

    /// `mode` or `mode/groups`, e.g. `pre-ln/4`.
    fn from_str(s: &str) -> Result<Self> {
        let (mode, groups) = match s.split_once('/') {
            Some((m, g)) => (m, g.parse().map_err(|_| invalid(format!("bad group count in {s:?}")))?),
            None => (s, 1),
        };
        if groups == 0 {
            return Err(invalid("group count must be positive"));
        }
        Ok(Normalization { mode: mode.parse()?, groups })
    }
}

/// Everything that defines a network apart from its parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Model {
    pub act: Activation,
    pub hyper: Hyper,
    pub norm: Normalization,
}

impl Model {
    pub fn new(act: Activation, hyper: Hyper, mode: NormMode) -> Self {
        Model { act, hyper, norm: mode.into() }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.norm.groups = groups;
        self
    }

    fn check_width(&self, width: usize) -> Result<()> {
        let g = self.norm.groups;
        if self.norm.mode != NormMode::Vanilla && (g == 0 || width % g != 0) {
            return Err(invalid(format!("{g} normalization groups do not divide width {width}")));
        }
        Ok(())
    }
}

/// One affine layer, stored unscaled.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// N_out × N_in.
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    /// Normalization gain for this layer's output; `None` is all ones.
    pub gain: Option<DVector<f64>>,
    /// Normalization shift; `None` is all zeros.
    pub shift: Option<DVector<f64>>,
}

impl LayerParams {
    pub fn new(weights: DMatrix<f64>, biases: DVector<f64>) -> Self {
        LayerParams { weights, biases, gain: None, shift: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Source {
    Seeded { seed: u64, member: u64 },
    Explicit(Vec<LayerParams>),
}

/// Weights and biases of a whole network, entries standard normal.
///
/// Seeded networks never hold their matrices: layer l is regenerated from
/// its own stream each time it is requested, which keeps wide and deep
/// ensembles within memory.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    dims: Vec<usize>,
    source: Source,
}

impl NetworkParams {
    /// Network with layer widths `dims` = [N₀, N₁, ..., N_L] drawn
    /// deterministically from (`seed`, `member`).
    pub fn seeded(dims: Vec<usize>, seed: u64, member: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(invalid(format!("need at least one layer and positive widths, got {dims:?}")));
        }
        Ok(NetworkParams { dims, source: Source::Seeded { seed, member } })
    }

    /// Input width `input_dim` followed by `depth` layers of width `width`.
    pub fn uniform(input_dim: usize, width: usize, depth: usize, seed: u64, member: u64) -> Result<Self> {
        let mut dims = vec![width; depth + 1];
        dims[0] = input_dim;
        Self::seeded(dims, seed, member)
    }

    pub fn explicit(layers: Vec<LayerParams>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| invalid("network needs at least one layer"))?;
        let mut dims = vec![first.weights.ncols()];
        for (i, p) in layers.iter().enumerate() {
            let (rows, cols) = p.weights.shape();
            let n = *dims.last().unwrap();
            let sized = |v: &Option<DVector<f64>>| v.as_ref().map_or(true, |v| v.len() == rows);
            if cols != n || rows == 0 || p.biases.len() != rows || !sized(&p.gain) || !sized(&p.shift) {
                return Err(invalid(format!("layer {} has inconsistent shapes", i + 1)));
            }
            dims.push(rows);
        }
        Ok(NetworkParams { dims, source: Source::Explicit(layers) })
    }

    /// [N₀, N₁, ..., N_L].
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    /// Parameters of layer `l` in 1..=L. Panics outside that range.
    pub fn layer(&self, l: usize) -> Cow<'_, LayerParams> {
        assert!((1..=self.depth()).contains(&l), "layer {l} outside 1..={}", self.depth());
        match &self.source {
            Source::Explicit(layers) => Cow::Borrowed(&layers[l - 1]),
            Source::Seeded { seed, member } => {
                let (rows, cols) = (self.dims[l], self.dims[l - 1]);
                let weights = normal_matrix(&mut stream(*seed, Draw::Weight, l as u64, *member), rows, cols);
                let biases = normal_vector(&mut stream(*seed, Draw::Bias, l as u64, *member), rows);
                Cow::Owned(LayerParams::new(weights, biases))
            }
        }
    }

    /// Same network with every layer held in memory.
    pub fn materialize(&self) -> NetworkParams {
        let layers = (1..=self.depth()).map(|l| self.layer(l).into_owned()).collect();
        NetworkParams { dims: self.dims.clone(), source: Source::Explicit(layers) }
    }
}

#[derive(Clone, Debug)]
struct NormState {
    normalized: DVector<f64>,
    inv_std: Vec<f64>,
    group_size: usize,
}

impl NormState {
    fn new(z: &DVector<f64>, groups: usize) -> Self {
        let m = z.len() / groups;
        let mut normalized = z.clone();
        let mut inv_std = Vec::with_capacity(groups);
        for chunk in normalized.as_mut_slice().chunks_exact_mut(m) {
            let mean = chunk.iter().sum::<f64>() / m as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        NormState { normalized, inv_std, group_size: m }
    }

    // t ← s(t − mean(t) − n·mean(n t)) per group; the matrix is symmetric.
    fn apply(&self, t: &mut [f64]) {
        let m = self.group_size;
        let n = self.normalized.as_slice();
        for ((tg, ng), &s) in t.chunks_exact_mut(m).zip(n.chunks_exact(m)).zip(&self.inv_std) {
            let m1 = tg.iter().sum::<f64>() / m as f64;
            let m2 = tg.iter().zip(ng).map(|(a, b)| a * b).sum::<f64>() / m as f64;
            tg.iter_mut().zip(ng).for_each(|(v, &nv)| *v = s * (*v - m1 - nv * m2));
        }
    }
}

/// What the hidden map a^l(h^l) looked like at one input.
#[derive(Clone, Debug)]
pub(crate) struct HiddenState {
    mode: NormMode,
    /// φ′ where φ was applied.
    slope: DVector<f64>,
    norm: Option<NormState>,
    gain: Option<DVector<f64>>,
    pub(crate) post: DVector<f64>,
}

fn scale_rows(t: &mut [f64], d: &DVector<f64>) {
    t.iter_mut().zip(d.iter()).for_each(|(v, s)| *v *= s);
}

impl HiddenState {
    pub(crate) fn new(model: &Model, pre: &DVector<f64>, gain: Option<&DVector<f64>>, shift: Option<&DVector<f64>>) -> Self {
        let act = model.act;
        let affine = |n: &DVector<f64>| {
            let mut u = n.clone();
            if let Some(g) = gain {
                u.component_mul_assign(g);
            }
            if let Some(b) = shift {
                u += b;
            }
            u
        };
        let (slope, norm, post) = match model.norm.mode {
            NormMode::Vanilla => (pre.map(|v| act.slope(v)), None, pre.map(|v| act.value(v))),
            NormMode::PreLn => {
                let ns = NormState::new(pre, model.norm.groups);
                let u = affine(&ns.normalized);
                (u.map(|v| act.slope(v)), Some(ns), u.map(|v| act.value(v)))
            }
            NormMode::PostLn => {
                let ns = NormState::new(&pre.map(|v| act.value(v)), model.norm.groups);
                let post = affine(&ns.normalized);
                (pre.map(|v| act.slope(v)), Some(ns), post)
            }
        };
        HiddenState { mode: model.norm.mode, slope, norm, gain: gain.cloned(), post }
    }

    pub(crate) fn normalized(&self) -> Option<&DVector<f64>> {
        self.norm.as_ref().map(|n| &n.normalized)
    }

    /// Gradient factor of the output with respect to the gain input u = γn + β
    /// (PreLN multiplies by φ′(u), PostLN passes through).
    pub(crate) fn affine_slope(&self) -> Option<&DVector<f64>> {
        match self.mode {
            NormMode::PreLn => Some(&self.slope),
            _ => None,
        }
    }

    /// t ← (∂a/∂h) t.
    pub(crate) fn apply(&self, t: &mut [f64]) {
        match (&self.norm, self.mode) {
            (Some(ns), NormMode::PreLn) => {
                ns.apply(t);
                self.scale_gain(t);
                scale_rows(t, &self.slope);
            }
            (Some(ns), NormMode::PostLn) => {
                scale_rows(t, &self.slope);
                ns.apply(t);
                self.scale_gain(t);
            }
            _ => scale_rows(t, &self.slope),
        }
    }

    /// t ← (∂a/∂h)ᵀ t.
    pub(crate) fn apply_transpose(&self, t: &mut [f64]) {
        match (&self.norm, self.mode) {
            (Some(ns), NormMode::PreLn) => {
                scale_rows(t, &self.slope);
                self.scale_gain(t);
                ns.apply(t);
            }
            (Some(ns), NormMode::PostLn) => {
                self.scale_gain(t);
                ns.apply(t);
                scale_rows(t, &self.slope);
            }
            _ => scale_rows(t, &self.slope),
        }
    }

    fn scale_gain(&self, t: &mut [f64]) {
        if let Some(g) = &self.gain {
            scale_rows(t, g);
        }
    }

    pub(crate) fn apply_columns(&self, m: &mut DMatrix<f64>, transpose: bool) {
        let rows = m.nrows();
        for col in m.as_mut_slice().chunks_exact_mut(rows) {
            if transpose {
                self.apply_transpose(col);
            } else {
                self.apply(col);
            }
        }
    }
}

/// Every layer of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    input: DVector<f64>,
    pre: Vec<DVector<f64>>,
    hidden: Vec<HiddenState>,
}

impl Forward {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    /// h^l for l in 1..=L.
    pub fn preactivation(&self, l: usize) -> &DVector<f64> {
        &self.pre[l - 1]
    }

    pub fn preactivations(&self) -> &[DVector<f64>] {
        &self.pre
    }

    /// a^l for l in 0..L; a⁰ is the input.
    pub fn activation(&self, l: usize) -> &DVector<f64> {
        if l == 0 {
            &self.input
        } else {
            &self.hidden[l - 1].post
        }
    }

    /// Normalized values of hidden layer l, before gain and shift.
    pub fn normalized(&self, l: usize) -> Option<&DVector<f64>> {
        self.hidden.get(l.wrapping_sub(1)).and_then(|h| h.normalized())
    }

    /// Empirical kernel (1/N_l)Σ(h^l)².
    pub fn kernel(&self, l: usize) -> f64 {
        let h = self.preactivation(l);
        h.norm_squared() / h.len() as f64
    }

    pub(crate) fn hidden(&self, l: usize) -> &HiddenState {
        &self.hidden[l - 1]
    }
}

pub(crate) fn check(params: &NetworkParams, model: &Model, x: &DVector<f64>) -> Result<()> {
    model.hyper.validate()?;
    if x.len() != params.dims[0] {
        return Err(invalid(format!("input has length {}, network expects {}", x.len(), params.dims[0])));
    }
    if model.norm.mode != NormMode::Vanilla {
        for &w in &params.dims[1..params.depth()] {
            model.check_width(w)?;
        }
    }
    Ok(())
}

/// Runs the network on `x`, keeping every layer.
pub fn forward(params: &NetworkParams, model: &Model, x: &DVector<f64>) -> Result<Forward> {
    check(params, model, x)?;
    let mut out = Forward { input: x.clone(), pre: Vec::new(), hidden: Vec::new() };
    sweep(params, model, x, None, params.depth(), |_, pre, hidden| {
        out.pre.push(pre.clone());
        if let Some(h) = hidden {
            out.hidden.push(h.clone());
        }
    });
    Ok(out)
}

/// Per-layer results of one pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct Sweep {
    /// (1/N_l)‖h^l‖² for l in 1..=upto.
    pub kernels: Vec<f64>,
    /// J^{l0,l} for l in l0+1..=upto.
    pub jacobian: Vec<f64>,
}

pub(crate) fn preactivation(hp: Hyper, p: &LayerParams, a: &DVector<f64>) -> DVector<f64> {
    let scale = (hp.weight_var / a.len() as f64).sqrt();
    let mut h = &p.weights * a;
    h *= scale;
    h.axpy(hp.sigma_b(), &p.biases, 1.0);
    h
}

/// W·A for the hidden map A, in O(N²) by applying Aᵀ to the rows of W.
pub(crate) fn weights_times_jacobian(w: &DMatrix<f64>, hidden: &HiddenState) -> DMatrix<f64> {
    let mut wt = w.transpose();
    hidden.apply_columns(&mut wt, true);
    wt.transpose()
}

/// Forward pass up to layer `upto`, propagating the tangent basis of h^{l0}
/// when `l0` is given. `visit` sees each layer's preactivation and, below
/// `upto`, its hidden state.
pub(crate) fn sweep(
    params: &NetworkParams,
    model: &Model,
    x: &DVector<f64>,
    l0: Option<usize>,
    upto: usize,
    mut visit: impl FnMut(usize, &DVector<f64>, Option<&HiddenState>),
) -> Sweep {
    let hp = model.hyper;
    let mut out = Sweep::default();
    let mut prev: Option<HiddenState> = None;
    let mut tangent: Option<DMatrix<f64>> = None;
    for l in 1..=upto {
        let p = params.layer(l);
        let a = prev.as_ref().map_or(x, |h| &h.post);
        let pre = preactivation(hp, &p, a);
        let scale = (hp.weight_var / a.len() as f64).sqrt();
        if let Some(l0) = l0 {
            let t = if l == l0 + 1 {
                match &prev {
                    None => Some(&p.weights * scale),
                    Some(h) => Some(weights_times_jacobian(&p.weights, h) * scale),
                }
            } else if l > l0 + 1 {
                let mut t = tangent.take().unwrap();
                prev.as_ref().unwrap().apply_columns(&mut t, false);
                Some(&p.weights * t * scale)
            } else {
                None
            };
            if let Some(t) = t {
                out.jacobian.push(t.norm_squared() / pre.len() as f64);
                tangent = Some(t);
            }
        }
        out.kernels.push(pre.norm_squared() / pre.len() as f64);
        let hidden = (l < params.depth() && l < upto)
            .then(|| HiddenState::new(model, &pre, p.gain.as_ref(), p.shift.as_ref()));
        visit(l, &pre, hidden.as_ref());
        prev = hidden;
    }
    out
}

fn check_layers(params: &NetworkParams, l0: usize, l: usize) -> Result<()> {
    if l0 >= l || l > params.depth() {
        return Err(invalid(format!("need 0 <= l0 < l <= {}, got l0 = {l0}, l = {l}", params.depth())));
    }
    Ok(())
}

/// Exact (1/N_l)‖∂h^l/∂h^{l0}‖²_F for one network and input. h⁰ is the input.
pub fn partial_jacobian_norm(params: &NetworkParams, model: &Model, x: &DVector<f64>, l0: usize, l: usize) -> Result<f64> {
    check(params, model, x)?;
    check_layers(params, l0, l)?;
    let s = sweep(params, model, x, Some(l0), l, |_, _, _| {});
    Ok(*s.jacobian.last().unwrap())
}

/// J^{l0,l} for every l in l0+1..=L from a single pass.
pub fn partial_jacobian_profile(params: &NetworkParams, model: &Model, x: &DVector<f64>, l0: usize) -> Result<Vec<f64>> {
    check(params, model, x)?;
    check_layers(params, l0, params.depth())?;
    Ok(sweep(params, model, x, Some(l0), params.depth(), |_, _, _| {}).jacobian)
}
