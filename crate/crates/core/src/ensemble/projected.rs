//! Sampling a random network only along the directions a pass actually uses.
//!
//! Within one forward/tangent pass the weights W^l touch nothing but the
//! matrix M = [a^{l−1} | T^{l−1}] of the activation and the tangent columns,
//! and M is fixed by earlier layers. Writing M = QR with orthonormal Q, the
//! product W^l M = (W^l Q) R where W^l Q is again a matrix of independent
//! standard normals. Drawing Z ~ N(0, 1) of that shape and forming Z R gives
//! every preactivation and tangent with exactly the joint law of the dense
//! network, at O(N·k) draws per layer instead of O(N²). When M has as many
//! columns as rows nothing is saved and the layer is drawn densely.

use nalgebra::{DMatrix, DVector};

use super::network::{preactivation, weights_times_jacobian, HiddenState, LayerParams, Model, Sweep};
use super::rng::{normal_matrix, normal_vector, stream, Draw};

/// Same contract as the dense sweep, for a network identified by
/// (`seed`, `member`) that is never materialized.
pub(crate) fn sweep(model: &Model, dims: &[usize], seed: u64, member: u64, x: &DVector<f64>, l0: Option<usize>, upto: usize) -> Sweep {
    let hp = model.hyper;
    let depth = dims.len() - 1;
    let mut out = Sweep::default();
    let mut prev: Option<HiddenState> = None;
    let mut tangent: Option<DMatrix<f64>> = None;
    for l in 1..=upto {
        let (n_in, n_out) = (dims[l - 1], dims[l]);
        let scale = (hp.weight_var / n_in as f64).sqrt();
        let biases = || normal_vector(&mut stream(seed, Draw::Bias, l as u64, member), n_out);
        let dense = || normal_matrix(&mut stream(seed, Draw::Weight, l as u64, member), n_out, n_in);
        let a = prev.as_ref().map_or(x, |h| &h.post);

        let starts_here = l0.is_some_and(|l0| l == l0 + 1);
        let (pre, t) = if starts_here {
            // the tangent basis spans everything, so draw the layer outright
            let layer = LayerParams::new(dense(), biases());
            let t = match &prev {
                None => &layer.weights * scale,
                Some(h) => weights_times_jacobian(&layer.weights, h) * scale,
            };
            (preactivation(hp, &layer, a), Some(t))
        } else {
            let mut m = DMatrix::zeros(n_in, 1 + tangent.as_ref().map_or(0, |t| t.ncols()));
            m.set_column(0, a);
            if let Some(mut t) = tangent.take() {
                prev.as_ref().unwrap().apply_columns(&mut t, false);
                m.columns_mut(1, t.ncols()).copy_from(&t);
            }
            let wm = if m.ncols() >= n_in {
                dense() * m
            } else if m.ncols() == 1 {
                let mut z = normal_matrix(&mut stream(seed, Draw::Projected, l as u64, member), n_out, 1);
                z *= m.norm();
                z
            } else {
                let r = m.qr().r();
                normal_matrix(&mut stream(seed, Draw::Projected, l as u64, member), n_out, r.nrows()) * r
            };
            let mut pre = wm.column(0) * scale;
            pre.axpy(hp.sigma_b(), &biases(), 1.0);
            let t = (wm.ncols() > 1).then(|| wm.columns(1, wm.ncols() - 1) * scale);
            (pre, t)
        };
        if let Some(t) = t {
            out.jacobian.push(t.norm_squared() / n_out as f64);
            tangent = Some(t);
        }
        out.kernels.push(pre.norm_squared() / n_out as f64);
        prev = (l < depth && l < upto).then(|| HiddenState::new(model, &pre, None, None));
    }
    out
}
