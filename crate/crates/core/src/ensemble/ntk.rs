//! Empirical neural tangent kernel of a single small network.

use nalgebra::{DMatrix, DVector};

use super::network::{check, forward, Model, NetworkParams};
use crate::error::{invalid, Result};
use crate::meanfield::NormMode;

/// Widths above this are refused unless the guard is lifted.
pub const NTK_MAX_WIDTH: usize = 256;
pub const NTK_MAX_DEPTH: usize = 12;

/// Θ^L = (1/N_L)Σ_i‖∇_θ h^L_i‖² over every weight, bias, and (with
/// normalization) gain and shift, at parameters drawn from N(0, 1).
pub fn empirical_ntk(params: &NetworkParams, model: &Model, x: &DVector<f64>) -> Result<f64> {
    empirical_ntk_with(params, model, x, false)
}

/// As [`empirical_ntk`]; `allow_large` skips the size guard. Cost grows as
/// depth × width³.
pub fn empirical_ntk_with(params: &NetworkParams, model: &Model, x: &DVector<f64>, allow_large: bool) -> Result<f64> {
    check(params, model, x)?;
    let dims = params.dims();
    let widest = dims[1..].iter().copied().max().unwrap();
    if !allow_large && (widest > NTK_MAX_WIDTH || params.depth() > NTK_MAX_DEPTH) {
        return Err(invalid(format!(
            "empirical NTK is limited to width {NTK_MAX_WIDTH} and depth {NTK_MAX_DEPTH}; got {widest} and {}",
            params.depth()
        )));
    }
    let hp = model.hyper;
    let fwd = forward(params, model, x)?;
    let depth = params.depth();
    // g holds (∂h^L/∂h^l)ᵀ, one column per output neuron.
    let mut g = DMatrix::<f64>::identity(dims[depth], dims[depth]);
    let mut total = 0.0;
    for l in (1..=depth).rev() {
        let a = fwd.activation(l - 1);
        let g2 = g.norm_squared();
        total += g2 * (hp.weight_var / dims[l - 1] as f64 * a.norm_squared() + hp.bias_var);
        if l == 1 {
            break;
        }
        let scale = (hp.weight_var / dims[l - 1] as f64).sqrt();
        let mut ga = params.layer(l).weights.tr_mul(&g) * scale;
        let hidden = fwd.hidden(l - 1);
        if model.norm.mode != NormMode::Vanilla {
            let n = hidden.normalized().unwrap();
            let slope = hidden.affine_slope();
            for (k, row) in ga.row_iter().enumerate() {
                let d = slope.map_or(1.0, |s| s[k]);
                total += d * d * row.norm_squared() * (n[k] * n[k] + 1.0);
            }
        }
        hidden.apply_columns(&mut ga, true);
        g = ga;
    }
    Ok(total / dims[depth] as f64)
}
