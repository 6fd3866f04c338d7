//! Finite-width Monte Carlo: ensembles of random networks measured exactly
//! per draw.
//!
//! Every member is an independent network drawn from its own random streams;
//! members are evaluated through [`crate::exec::map_indexed`] and reduced in
//! index order, so results are bit-identical for a given seed whether they
//! ran in parallel or not.

mod network;
mod ntk;
mod projected;
mod rng;

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

pub use network::{
    forward, partial_jacobian_norm, partial_jacobian_profile, Forward, LayerParams, Model, NetworkParams, Normalization,
    LN_EPS,
};
pub use ntk::{empirical_ntk, empirical_ntk_with, NTK_MAX_DEPTH, NTK_MAX_WIDTH};

use crate::error::{invalid, Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::meanfield::{self, NormMode};
use network::Sweep;
use rng::{stream, Draw, SHARED};

/// Where network inputs come from.
#[derive(Clone, Debug, PartialEq)]
pub enum InputSource {
    /// Independent N(mean, std²) entries.
    Gaussian { mean: f64, std: f64 },
    /// Raw little-endian f32 vector of length N₀.
    File(PathBuf),
}

impl Default for InputSource {
    fn default() -> Self {
        InputSource::Gaussian { mean: 0.0, std: 0.5 }
    }
}

/// Whether the ensemble shares one input or draws one per member.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputMode {
    #[default]
    Shared,
    PerInit,
}

/// How member networks are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sampler {
    /// Every weight matrix is drawn in full.
    #[default]
    Dense,
    /// Weights are drawn only along the directions the pass uses. Same
    /// distribution of results as `Dense`, much cheaper when the tangent
    /// basis is narrow; see the `projected` module.
    Projected,
}

/// One ensemble experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub model: Model,
    /// Width N of every layer after the input.
    pub width: usize,
    pub input_dim: usize,
    pub depth: usize,
    pub n_init: usize,
    pub seed: u64,
    pub input: InputSource,
    pub input_mode: InputMode,
    pub sampler: Sampler,
    pub exec: Execution,
}

impl EnsembleConfig {
    /// Defaults: N₀ = N, 30 members, seed 0, shared N(0, 0.25) input,
    /// dense sampling.
    pub fn new(model: Model, width: usize, depth: usize) -> Self {
        EnsembleConfig {
            model,
            width,
            input_dim: width,
            depth,
            n_init: 30,
            seed: 0,
            input: InputSource::default(),
            input_mode: InputMode::Shared,
            sampler: Sampler::Dense,
            exec: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.hyper.validate()?;
        if self.depth < 2 {
            return Err(invalid(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.n_init == 0 || self.width == 0 || self.input_dim == 0 {
            return Err(invalid("width, input dimension and ensemble size must be positive"));
        }
        let g = self.model.norm.groups;
        if self.model.norm.mode != NormMode::Vanilla && (g == 0 || self.width % g != 0) {
            return Err(invalid(format!("{g} normalization groups do not divide width {}", self.width)));
        }
        if let InputSource::Gaussian { mean, std } = self.input {
            if !(mean.is_finite() && std.is_finite() && std >= 0.0) {
                return Err(invalid("input distribution needs finite mean and nonnegative std"));
            }
        }
        Ok(())
    }

    /// [N₀, N, ..., N].
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.width; self.depth + 1];
        d[0] = self.input_dim;
        d
    }

    /// Parameters of member `member`.
    pub fn network(&self, member: usize) -> NetworkParams {
        NetworkParams::seeded(self.dims(), self.seed, member as u64).expect("validated dims")
    }

    /// Input seen by `member`.
    pub fn input_for(&self, member: usize) -> Result<DVector<f64>> {
        self.inputs()?.get(self, member)
    }

    fn inputs(&self) -> Result<Inputs> {
        match (&self.input, self.input_mode) {
            (InputSource::File(path), _) => Ok(Inputs::Fixed(read_input_file(path, self.input_dim)?)),
            (InputSource::Gaussian { .. }, InputMode::Shared) => Ok(Inputs::Fixed(self.gaussian_input(SHARED))),
            (InputSource::Gaussian { .. }, InputMode::PerInit) => Ok(Inputs::PerMember),
        }
    }

    fn gaussian_input(&self, member: u64) -> DVector<f64> {
        let InputSource::Gaussian { mean, std } = self.input else { unreachable!() };
        let mut rng = stream(self.seed, Draw::Input, 0, member);
        DVector::from_fn(self.input_dim, |_, _| mean + std * rng.sample::<f64, _>(StandardNormal))
    }

    /// K¹ implied by the inputs: exact for a fixed input, the expectation
    /// under the input distribution otherwise.
    pub fn first_kernel(&self) -> Result<f64> {
        let hp = self.model.hyper;
        let q = match self.inputs()? {
            Inputs::Fixed(x) => x.norm_squared() / x.len() as f64,
            Inputs::PerMember => match self.input {
                InputSource::Gaussian { mean, std } => mean * mean + std * std,
                InputSource::File(_) => unreachable!(),
            },
        };
        Ok(hp.weight_var * q + hp.bias_var)
    }

    fn run(&self, l0: Option<usize>, upto: usize) -> Result<Vec<Sweep>> {
        self.validate()?;
        let inputs = self.inputs()?;
        let dims = self.dims();
        let members = map_indexed(self.exec, self.n_init, |i| {
            let x = inputs.get(self, i)?;
            Ok(match self.sampler {
                Sampler::Dense => network::sweep(&self.network(i), &self.model, &x, l0, upto, |_, _, _| {}),
                Sampler::Projected => projected::sweep(&self.model, &dims, self.seed, i as u64, &x, l0, upto),
            })
        });
        members.into_iter().collect()
    }
}

enum Inputs {
    Fixed(DVector<f64>),
    PerMember,
}

impl Inputs {
    fn get(&self, cfg: &EnsembleConfig, member: usize) -> Result<DVector<f64>> {
        Ok(match self {
            Inputs::Fixed(x) => x.clone(),
            Inputs::PerMember => cfg.gaussian_input(member as u64),
        })
    }
}

/// Reads a raw little-endian f32 vector of exactly `len` entries.
pub fn read_input_file(path: &Path, len: usize) -> Result<DVector<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    if bytes.len() != 4 * len {
        return Err(invalid(format!(
            "{} holds {} bytes, expected {} for {len} f32 values",
            path.display(),
            bytes.len(),
            4 * len
        )));
    }
    Ok(DVector::from_iterator(
        len,
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
    ))
}

/// Mean and standard error over ensemble members.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    /// Sample standard deviation over √n; NaN for a single member.
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let stderr = if n > 1 { (var / n as f64).sqrt() } else { f64::NAN };
        Estimate { mean, stderr, n }
    }
}

/// Ensemble-averaged partial Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianEstimate {
    /// Value at the target layer.
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub l0: usize,
    /// J^{l0,l} for l = l0+1, l0+2, ... when a whole profile was measured.
    pub per_layer: Option<Vec<Estimate>>,
}

fn column(members: &[Sweep], pick: impl Fn(&Sweep) -> &[f64], i: usize) -> Estimate {
    let xs: Vec<f64> = members.iter().map(|m| pick(m)[i]).collect();
    Estimate::from_samples(&xs)
}

/// J^{L−2,L−1}, which approaches χ* once the kernel has settled.
pub fn empirical_chi(cfg: &EnsembleConfig) -> Result<JacobianEstimate> {
    let l0 = cfg.depth - 2;
    let members = cfg.run(Some(l0), l0 + 1)?;
    let e = column(&members, |m| &m.jacobian, 0);
    Ok(JacobianEstimate { mean: e.mean, stderr: e.stderr, n: e.n, l0, per_layer: None })
}

/// J^{l0,l} for every l in l0+1..=L.
pub fn jacobian_profile(cfg: &EnsembleConfig, l0: usize) -> Result<JacobianEstimate> {
    if l0 >= cfg.depth {
        return Err(invalid(format!("l0 = {l0} must be below depth {}", cfg.depth)));
    }
    let members = cfg.run(Some(l0), cfg.depth)?;
    let per_layer: Vec<Estimate> = (0..cfg.depth - l0).map(|i| column(&members, |m| &m.jacobian, i)).collect();
    let last = *per_layer.last().unwrap();
    Ok(JacobianEstimate { mean: last.mean, stderr: last.stderr, n: last.n, l0, per_layer: Some(per_layer) })
}

/// Empirical kernel (1/N)Σ(h^l)² for l in 1..=L.
pub fn kernel_profile(cfg: &EnsembleConfig) -> Result<Vec<Estimate>> {
    let members = cfg.run(None, cfg.depth)?;
    Ok((0..cfg.depth).map(|i| column(&members, |m| &m.kernels, i)).collect())
}

/// Measured J^{0,2} against the infinite-width prediction with and without
/// the finite-N₀ input correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct N0Check {
    pub measured: Estimate,
    pub corrected_pred: f64,
    pub uncorrected_pred: f64,
    pub corrected_rel_err: f64,
    pub uncorrected_rel_err: f64,
}

/// Compares J^{0,2} with the N₀-corrected prediction. Vanilla networks with
/// a shared input only, since the correction depends on ‖x‖².
pub fn n0_correction_check(cfg: &EnsembleConfig) -> Result<N0Check> {
    if cfg.model.norm.mode != NormMode::Vanilla {
        return Err(invalid("the input correction is only derived for vanilla networks"));
    }
    if cfg.input_mode == InputMode::PerInit && matches!(cfg.input, InputSource::Gaussian { .. }) {
        return Err(invalid("the input correction needs one shared input"));
    }
    let members = cfg.run(Some(0), 2)?;
    let measured = column(&members, |m| &m.jacobian, 1);
    let x = cfg.input_for(0)?;
    let q = x.norm_squared() / cfg.input_dim as f64;
    let m = &cfg.model;
    let tr = meanfield::trace(m.act, NormMode::Vanilla, m.hyper, 2, cfg.first_kernel()?, 0)?;
    let corrected_pred = meanfield::j0_corrected(&tr, cfg.input_dim, q, 2)?;
    let uncorrected_pred = meanfield::j0_uncorrected(&tr, 2)?;
    let rel = |p: f64| (measured.mean - p).abs() / p.abs();
    Ok(N0Check {
        measured,
        corrected_pred,
        uncorrected_pred,
        corrected_rel_err: rel(corrected_pred),
        uncorrected_rel_err: rel(uncorrected_pred),
    })
}

/// Ensemble mean of the empirical NTK at the output layer. Members are
/// always drawn densely.
pub fn ntk_ensemble(cfg: &EnsembleConfig, allow_large: bool) -> Result<Estimate> {
    cfg.validate()?;
    let inputs = cfg.inputs()?;
    let values = map_indexed(cfg.exec, cfg.n_init, |i| {
        empirical_ntk_with(&cfg.network(i), &cfg.model, &inputs.get(cfg, i)?, allow_large)
    });
    Ok(Estimate::from_samples(&values.into_iter().collect::<Result<Vec<_>>>()?))
}
