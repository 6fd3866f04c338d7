//! Acceptance criteria 1 to 9, one `criterion N: PASS|FAIL` line each.
//!
//! Runs without the libtest harness so the verdict lines come out in order
//! and uncaptured. Arguments are treated as criterion numbers to run; with
//! none, all run. The process fails if any criterion does.

use std::f64::consts::PI;
use std::io::Write;
use std::panic::catch_unwind;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use critinit::activations::{moment_closed, moment_quadrature, Activation, MomentKind};
use critinit::analysis::{estimate_series, fit_exponential, fit_power_law};
use critinit::critical::{chi_star, critical_line, critical_point, exponent_numeric, CriticalLinePoint};
use critinit::ensemble::{
    empirical_chi, empirical_ntk, forward, jacobian_profile, n0_correction_check, partial_jacobian_norm,
    EnsembleConfig, LayerParams, Model, NetworkParams, Sampler, LN_EPS,
};
use critinit::meanfield::{Hyper, NormMode};

const ACTS: [Activation; 3] = [Activation::ScaleInvariant { a_plus: 1.0, a_minus: 0.0 }, Activation::Erf, Activation::Gelu];
const MODES: [NormMode; 3] = [NormMode::Vanilla, NormMode::PreLn, NormMode::PostLn];

type Outcome = (bool, String);

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn criterion_1_moment_oracle() -> Outcome {
    let start = Instant::now();
    let acts = [Activation::relu(), Activation::scale_invariant(1.5, -0.25), Activation::Erf, Activation::Gelu];
    let mut worst = (0.0f64, String::new());
    for act in acts {
        for kind in MomentKind::ALL {
            for i in 0..50 {
                let k = 10f64.powf(-3.0 + 4.0 * i as f64 / 49.0);
                let closed = moment_closed(act, kind, k).unwrap();
                let quad = moment_quadrature(act, kind, k, 120).unwrap();
                let err = (closed - quad).abs();
                if !(err <= worst.0) {
                    worst = (err, format!("{act} {kind:?} K = {k:.3e}"));
                }
            }
        }
    }
    let t = secs(start.elapsed());
    (worst.0 <= 1e-8 && t < 1.0, format!("max |closed − quad| = {:.2e} at {}; {t:.3} s", worst.0, worst.1))
}

fn criterion_2_critical_points() -> Outcome {
    let start = Instant::now();
    let near = |pts: &[CriticalLinePoint], w: f64, b: f64| {
        pts.iter().any(|p| (p.sigma_w - w).abs() <= 1e-3 && (p.sigma_b - b).abs() <= 1e-3)
    };
    let relu = critical_point(Activation::relu(), NormMode::Vanilla).unwrap();
    let erf = critical_point(Activation::Erf, NormMode::Vanilla).unwrap();
    let gelu = critical_point(Activation::Gelu, NormMode::Vanilla).unwrap();
    let t = secs(start.elapsed());
    let ok = near(&relu, std::f64::consts::SQRT_2, 0.0) && near(&erf, 0.886227, 0.0) && near(&gelu, 1.408, 0.416) && near(&gelu, 2.0, 0.0);
    let fmt = |pts: &[CriticalLinePoint]| {
        pts.iter().map(|p| format!("({:.6}, {:.6})", p.sigma_w, p.sigma_b)).collect::<Vec<_>>().join(" ")
    };
    (ok && t < 1.0, format!("ReLU {} Erf {} GELU {}; {t:.3} s", fmt(&relu), fmt(&erf), fmt(&gelu)))
}

// χ on the PostLN lines written out directly from the Erf and GELU moments
// at K = σ_w² + σ_b².
fn chi_erf_post_ln(w: f64, b: f64) -> f64 {
    let k = w * w + b * b;
    2.0 * w * w / (1.0 + 4.0 * k).sqrt() / (2.0 * k / (1.0 + 2.0 * k)).asin()
}

fn chi_gelu_post_ln(w: f64, b: f64) -> f64 {
    let k = w * w + b * b;
    let asn = (k / (1.0 + k)).asin();
    let num = w * w * (1.0 + k) * (PI + 2.0 * asn + 2.0 * k * (3.0 + 5.0 * k) / ((1.0 + k) * (1.0 + 2.0 * k).powf(1.5)));
    let den = PI * k * (1.0 + k) - 2.0 * k * k + 4.0 * k * k / (1.0 + 2.0 * k).sqrt() + 2.0 * k * (1.0 + k) * asn;
    num / den
}

fn criterion_3_ln_critical_lines() -> Outcome {
    let start = Instant::now();
    let sweep = linspace(0.5, 3.0, 26);
    let points = |act, mode| -> Vec<CriticalLinePoint> {
        critical_line(act, mode, &sweep, 1e-12).into_iter().flat_map(|s| s.points).collect()
    };
    let mut ok = true;
    let mut detail = Vec::new();
    for (act, mode, expected) in [
        (Activation::relu(), NormMode::PostLn, 0.683),
        (Activation::Erf, NormMode::PreLn, 0.324),
        (Activation::Gelu, NormMode::PreLn, 0.175),
    ] {
        let pts = points(act, mode);
        // least squares through the origin
        let slope = pts.iter().map(|p| p.sigma_w * p.sigma_b).sum::<f64>() / pts.iter().map(|p| p.sigma_w.powi(2)).sum::<f64>();
        ok &= pts.len() == sweep.len() && (slope - expected).abs() <= 1e-3;
        detail.push(format!("{act} {mode} slope {slope:.5} ({} pts)", pts.len()));
    }
    for (act, chi) in [(Activation::Erf, chi_erf_post_ln as fn(f64, f64) -> f64), (Activation::Gelu, chi_gelu_post_ln)] {
        let pts = points(act, NormMode::PostLn);
        let worst = pts.iter().map(|p| (chi(p.sigma_w, p.sigma_b) - 1.0).abs()).fold(0.0, f64::max);
        ok &= !pts.is_empty() && worst <= 1e-8;
        detail.push(format!("{act} post-ln max|χ−1| {worst:.1e} ({} pts)", pts.len()));
    }
    let t = secs(start.elapsed());
    (ok && t < 5.0, format!("{}; {t:.3} s", detail.join(", ")))
}

fn criterion_4_theory_exponents() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();

    let erf = Hyper::new((PI / 4.0).sqrt(), 0.0);
    let e = exponent_numeric(Activation::Erf, NormMode::Vanilla, erf, 1.0, 2000, 1000).unwrap();
    ok &= (e.zeta_last - 1.0).abs() <= 0.05;
    detail.push(format!("Erf ζ {:.4}", e.zeta_last));

    let relu = Hyper::from_variances(2.0, 0.0);
    let r = exponent_numeric(Activation::relu(), NormMode::Vanilla, relu, 1.0, 2000, 1000).unwrap();
    ok &= r.zeta == 0.0 && r.zeta_last == 0.0;
    detail.push(format!("ReLU ζ {}", r.zeta_last));

    let mut worst_ln = 0.0f64;
    for act in ACTS {
        for mode in [NormMode::PreLn, NormMode::PostLn] {
            for scan in critical_line(act, mode, &[0.75, 1.5, 2.5], 1e-12) {
                for p in scan.points {
                    let z = exponent_numeric(act, mode, p.hyper(), 1.0, 2000, 1000).unwrap();
                    worst_ln = worst_ln.max(z.zeta_last.abs()).max(z.zeta.abs());
                }
            }
        }
    }
    ok &= worst_ln <= 0.01;
    detail.push(format!("LN max|ζ| {worst_ln:.1e}"));

    let gelu = critical_point(Activation::Gelu, NormMode::Vanilla)
        .unwrap()
        .into_iter()
        .find(|p| (p.sigma_w - 1.408).abs() < 1e-2)
        .unwrap();
    // The natural K¹ = σ_w² + σ_b² lies below a second, stable fixed point
    // at K ≈ 3.03 and ends there; the critical K* attracts only from above.
    let hp = gelu.hyper();
    let g = exponent_numeric(Activation::Gelu, NormMode::Vanilla, hp, 2.0 * gelu.k_star, 4_000_000, 2_000_000).unwrap();
    ok &= ((g.zeta_last - 66.668) / 66.668).abs() <= 0.01;
    detail.push(format!("GELU l·(1−χ^l) at l = 4e6 from K¹ = 2K*: {:.3} (expected 66.668)", g.zeta_last));

    (ok, detail.join(", "))
}

fn ensemble(act: Activation, mode: NormMode, hp: Hyper, width: usize, depth: usize, n_init: usize) -> EnsembleConfig {
    let mut cfg = EnsembleConfig::new(Model::new(act, hp, mode), width, depth);
    cfg.n_init = n_init;
    cfg.sampler = Sampler::Projected;
    cfg
}

fn criterion_5_empirical_chi() -> Outcome {
    let start = Instant::now();
    let (sws, sbs) = ([0.75, 1.5, 2.25], [0.0, 0.5, 1.0]);
    let mut worst = (0.0f64, String::new());
    let mut cells = 0;
    for act in ACTS {
        for mode in MODES {
            for sw in sws {
                for sb in sbs {
                    let hp = Hyper::new(sw, sb);
                    let mut cfg = ensemble(act, mode, hp, 1000, 50, 30);
                    cfg.seed = cells;
                    let measured = empirical_chi(&cfg).unwrap();
                    let theory = chi_star(act, mode, hp, cfg.first_kernel().unwrap()).unwrap();
                    let rel = (measured.mean - theory).abs() / theory;
                    if !(rel <= worst.0) {
                        worst = (rel, format!("{act} {mode} ({sw}, {sb}): {:.4} vs {theory:.4}", measured.mean));
                    }
                    cells += 1;
                }
            }
        }
    }
    let t = secs(start.elapsed());
    (worst.0 <= 0.05, format!("{cells} cells, worst relative error {:.3} at {}; {t:.1} s", worst.0, worst.1))
}

fn profile(act: Activation, hp: Hyper, mode: NormMode, width: usize, depth: usize, n_init: usize, seed: u64) -> Vec<(usize, f64)> {
    let mut cfg = ensemble(act, mode, hp, width, depth, n_init);
    cfg.input_dim = 16;
    cfg.seed = seed;
    estimate_series(&jacobian_profile(&cfg, 0).unwrap())
}

fn criterion_6_empirical_scaling() -> Outcome {
    let erf = profile(Activation::Erf, Hyper::new((PI / 4.0).sqrt(), 0.0), NormMode::Vanilla, 1000, 250, 25, 0);
    let zeta_erf = -fit_power_law(&erf, 100).unwrap().slope;
    let relu_zeta = |seed| {
        let s = profile(Activation::relu(), Hyper::from_variances(2.0, 0.0), NormMode::Vanilla, 1000, 250, 25, seed);
        -fit_power_law(&s, 100).unwrap().slope
    };
    let zeta_relu = relu_zeta(0);
    let ok = (zeta_erf - 1.0).abs() <= 0.15 && zeta_relu.abs() <= 0.05;
    // the verdict uses seed 0 only; other seeds show the sampling spread
    let spread: Vec<String> = (1..6).map(|s| format!("{:.3}", relu_zeta(s))).collect();
    (ok, format!("Erf ζ̂ {zeta_erf:.4}, ReLU ζ̂ {zeta_relu:.4} (seeds 1-5: {})", spread.join(" ")))
}

fn criterion_7_correlation_length() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for w2 in [1.0, 1.5, 2.5, 3.0] {
        let hp = Hyper::from_variances(w2, 0.0);
        let xi_of = |mode| {
            let series = profile(Activation::relu(), hp, mode, 1000, 40, 25, 0);
            fit_exponential(&series, 5).unwrap().xi
        };
        let (vanilla, pre) = (xi_of(NormMode::Vanilla), xi_of(NormMode::PreLn));
        let expected = 1.0 / (w2 / 2.0f64).ln().abs();
        let rel = (vanilla - expected).abs() / expected;
        ok &= rel <= 0.1 && pre > vanilla;
        detail.push(format!("σ_w² {w2}: ξ̂ {vanilla:.3} vs {expected:.3}, pre-ln ξ̂ {pre:.3e}"));
    }
    (ok, detail.join("; "))
}

fn criterion_8_input_width_correction() -> Outcome {
    let start = Instant::now();
    let mut cfg = EnsembleConfig::new(Model::new(Activation::Erf, Hyper::new(1.0, 0.0), NormMode::Vanilla), 4096, 2);
    cfg.input_dim = 16;
    cfg.n_init = 200;
    let c = n0_correction_check(&cfg).unwrap();
    let ok = (c.measured.mean - c.corrected_pred).abs() < (c.measured.mean - c.uncorrected_pred).abs();
    let t = secs(start.elapsed());
    (
        ok,
        format!(
            "J^(0,2) {:.5} ± {:.5}, corrected {:.5}, uncorrected {:.5}; {t:.1} s",
            c.measured.mean, c.measured.stderr, c.corrected_pred, c.uncorrected_pred
        ),
    )
}

// Reference network evaluated with dense matrices only.

fn normalize(z: &DVector<f64>, groups: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = z.len();
    let m = n / groups;
    let mut out = z.clone();
    let mut jac = DMatrix::zeros(n, n);
    for g in 0..groups {
        let r = g * m..(g + 1) * m;
        let seg = z.rows(r.start, m);
        let mean = seg.mean();
        let var = seg.map(|v| (v - mean).powi(2)).mean();
        let s = 1.0 / (var + LN_EPS).sqrt();
        let nz = seg.map(|v| (v - mean) * s);
        out.rows_mut(r.start, m).copy_from(&nz);
        let block = (DMatrix::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64) - &nz * nz.transpose() / m as f64) * s;
        jac.view_mut((r.start, r.start), (m, m)).copy_from(&block);
    }
    (out, jac)
}

// a^l and ∂a^l/∂h^l.
fn hidden_map(model: &Model, h: &DVector<f64>, p: &LayerParams) -> (DVector<f64>, DMatrix<f64>) {
    let act = model.act;
    let n = h.len();
    let gain = p.gain.clone().unwrap_or_else(|| DVector::from_element(n, 1.0));
    let shift = p.shift.clone().unwrap_or_else(|| DVector::zeros(n));
    match model.norm.mode {
        NormMode::Vanilla => (h.map(|v| act.value(v)), DMatrix::from_diagonal(&h.map(|v| act.slope(v)))),
        NormMode::PreLn => {
            let (nz, jn) = normalize(h, model.norm.groups);
            let u = nz.component_mul(&gain) + &shift;
            let d = u.map(|v| act.slope(v)).component_mul(&gain);
            (u.map(|v| act.value(v)), DMatrix::from_diagonal(&d) * jn)
        }
        NormMode::PostLn => {
            let z = h.map(|v| act.value(v));
            let (nz, jn) = normalize(&z, model.norm.groups);
            let a = nz.component_mul(&gain) + &shift;
            (a, DMatrix::from_diagonal(&gain) * jn * DMatrix::from_diagonal(&h.map(|v| act.slope(v))))
        }
    }
}

// Preactivations of every layer and the dense ∂h^l/∂h^{l0}.
fn dense_reference(layers: &[LayerParams], model: &Model, x: &DVector<f64>, l0: usize, l: usize) -> (Vec<DVector<f64>>, DMatrix<f64>) {
    let hp = model.hyper;
    let mut pre = Vec::new();
    let mut a = x.clone();
    let mut jac: Option<DMatrix<f64>> = (l0 == 0).then(|| DMatrix::identity(x.len(), x.len()));
    for (i, p) in layers.iter().enumerate().take(l) {
        let lay = i + 1;
        let scale = (hp.weight_var / a.len() as f64).sqrt();
        let h = &p.weights * &a * scale + &p.biases * hp.sigma_b();
        if let Some(j) = jac.take() {
            jac = Some(&p.weights * scale * j);
        }
        if lay < l {
            let (next, da) = hidden_map(model, &h, p);
            jac = match jac {
                Some(j) => Some(da * j),
                None if lay == l0 => Some(da),
                None => None,
            };
            a = next;
        }
        pre.push(h);
    }
    (pre, jac.unwrap())
}

fn random_layers(dims: &[usize], seed: u64, with_affine: bool) -> Vec<LayerParams> {
    let base = NetworkParams::seeded(dims.to_vec(), seed, 0).unwrap().materialize();
    (1..dims.len())
        .map(|l| {
            let mut p = base.layer(l).into_owned();
            if with_affine {
                let n = dims[l];
                p.gain = Some(DVector::from_fn(n, |i, _| 0.7 + 0.05 * ((i * 7 + l) % 11) as f64));
                p.shift = Some(DVector::from_fn(n, |i, _| 0.1 * ((i * 3 + l) % 5) as f64 - 0.2));
            }
            p
        })
        .collect()
}

fn input(n: usize) -> DVector<f64> {
    DVector::from_fn(n, |i, _| (0.37 * (i as f64 + 1.0)).sin() + 0.1)
}

// Central differences of h^l with respect to the input.
fn fd_input_jacobian(params: &NetworkParams, model: &Model, x: &DVector<f64>, l: usize) -> DMatrix<f64> {
    let n_out = params.dims()[l];
    let mut jac = DMatrix::zeros(n_out, x.len());
    for j in 0..x.len() {
        let eps = 1e-6 * x[j].abs().max(1.0);
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[j] += eps;
        xm[j] -= eps;
        let hp = forward(params, model, &xp).unwrap().preactivation(l).clone();
        let hm = forward(params, model, &xm).unwrap().preactivation(l).clone();
        jac.set_column(j, &((hp - hm) / (2.0 * eps)));
    }
    jac
}

#[derive(Clone, Copy)]
enum Slot {
    Weight(usize),
    Bias(usize),
    Gain(usize),
    Shift(usize),
}

fn slot(p: &mut LayerParams, s: Slot) -> &mut f64 {
    match s {
        Slot::Weight(i) => &mut p.weights[i],
        Slot::Bias(i) => &mut p.biases[i],
        Slot::Gain(i) => &mut p.gain.as_mut().unwrap()[i],
        Slot::Shift(i) => &mut p.shift.as_mut().unwrap()[i],
    }
}

// Θ from central differences over every scalar parameter.
fn fd_ntk(layers: &[LayerParams], model: &Model, x: &DVector<f64>) -> f64 {
    let depth = layers.len();
    let out = |ls: Vec<LayerParams>| {
        let p = NetworkParams::explicit(ls).unwrap();
        forward(&p, model, x).unwrap().preactivation(depth).clone()
    };
    let eps = 1e-5;
    let mut total = 0.0;
    for (li, p) in layers.iter().enumerate() {
        let n = p.biases.len();
        let mut slots: Vec<Slot> = (0..p.weights.len()).map(Slot::Weight).chain((0..n).map(Slot::Bias)).collect();
        // gain and shift only act on hidden layers
        if li + 1 < depth && model.norm.mode != NormMode::Vanilla {
            slots.extend((0..n).map(Slot::Gain).chain((0..n).map(Slot::Shift)));
        }
        for s in slots {
            let (mut up, mut down) = (layers.to_vec(), layers.to_vec());
            *slot(&mut up[li], s) += eps;
            *slot(&mut down[li], s) -= eps;
            total += ((out(up) - out(down)) / (2.0 * eps)).norm_squared();
        }
    }
    total / layers[depth - 1].biases.len() as f64
}

fn criterion_9_brute_force_oracles() -> Outcome {
    let mut worst_dense = 0.0f64;
    let mut worst_ln_fd = 0.0f64;
    let mut worst_ntk = 0.0f64;
    for act in ACTS {
        for mode in MODES {
            for groups in [1, 4] {
                if mode == NormMode::Vanilla && groups > 1 {
                    continue;
                }
                let model = Model::new(act, Hyper::new(1.3, 0.4), mode).with_groups(groups);
                let dims = [24, 48, 64, 48, 32];
                let layers = random_layers(&dims, 11, true);
                let params = NetworkParams::explicit(layers.clone()).unwrap();
                let x = input(dims[0]);
                for (l0, l) in [(0, 1), (0, 4), (1, 3), (2, 4), (3, 4)] {
                    let (_, dense) = dense_reference(&layers, &model, &x, l0, l);
                    let expected = dense.norm_squared() / dims[l] as f64;
                    let got = partial_jacobian_norm(&params, &model, &x, l0, l).unwrap();
                    worst_dense = worst_dense.max((got - expected).abs() / expected);
                }

                let small = [6, 12, 12, 5];
                let sl = random_layers(&small, 5, true);
                let sp = NetworkParams::explicit(sl).unwrap();
                let m = Model::new(act, Hyper::new(1.3, 0.4), mode).with_groups(if groups > 1 { 2 } else { 1 });
                let xs = input(small[0]);
                for l in 1..=3 {
                    let fd = fd_input_jacobian(&sp, &m, &xs, l).norm_squared() / small[l] as f64;
                    let exact = partial_jacobian_norm(&sp, &m, &xs, 0, l).unwrap();
                    worst_ln_fd = worst_ln_fd.max((fd - exact).abs() / exact);
                }
            }
            for dims in [[3usize, 2, 2].as_slice(), &[3, 3, 3, 3]] {
                let model = Model::new(act, Hyper::new(1.2, 0.3), mode);
                let layers = random_layers(dims, 3, true);
                let params = NetworkParams::explicit(layers.clone()).unwrap();
                let x = input(dims[0]);
                let exact = empirical_ntk(&params, &model, &x).unwrap();
                let fd = fd_ntk(&layers, &model, &x);
                worst_ntk = worst_ntk.max((exact - fd).abs() / fd);
            }
        }
    }
    let ok = worst_dense <= 1e-10 && worst_ln_fd <= 1e-6 && worst_ntk <= 1e-6;
    (
        ok,
        format!(
            "dense composition {worst_dense:.1e}, LN finite differences {worst_ln_fd:.1e}, NTK finite differences {worst_ntk:.1e} (relative)"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, fn() -> Outcome); 9] = [
        (1, criterion_1_moment_oracle),
        (2, criterion_2_critical_points),
        (3, criterion_3_ln_critical_lines),
        (4, criterion_4_theory_exponents),
        (5, criterion_5_empirical_chi),
        (6, criterion_6_empirical_scaling),
        (7, criterion_7_correlation_length),
        (8, criterion_8_input_width_correction),
        (9, criterion_9_brute_force_oracles),
    ];
    // cargo passes libtest flags such as --nocapture; only numbers select
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (n, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let (pass, detail) = catch_unwind(run).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!pass);
        writeln!(out, "criterion {n}: {}  {detail}", if pass { "PASS" } else { "FAIL" }).unwrap();
        out.flush().unwrap();
    }
    if failed > 0 {
        writeln!(out, "{failed} criteria failed").unwrap();
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
