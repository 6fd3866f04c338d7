//! Property tests over randomly drawn activations, hyperparameters and
//! network shapes.

use nalgebra::DVector;
use proptest::prelude::*;

use critinit::activations::{moment_closed, moment_quadrature, Activation, MomentKind};
use critinit::analysis::{fit_exponential, fit_power_law, Phase};
use critinit::critical::{chi_star, correlation_length, fixed_point};
use critinit::ensemble::{
    empirical_chi, forward, partial_jacobian_norm, partial_jacobian_profile, EnsembleConfig, Model, NetworkParams,
    Sampler,
};
use critinit::exec::Execution;
use critinit::meanfield::{kernel_step, trace, Hyper, NormMode};

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Erf),
        Just(Activation::Gelu),
        (0.1f64..2.0, -1.0f64..1.0).prop_map(|(p, m)| Activation::scale_invariant(p, m)),
    ]
}

fn mode() -> impl Strategy<Value = NormMode> {
    prop_oneof![Just(NormMode::Vanilla), Just(NormMode::PreLn), Just(NormMode::PostLn)]
}

fn hyper() -> impl Strategy<Value = Hyper> {
    (0.3f64..3.0, 0.0f64..1.5).prop_map(|(w, b)| Hyper::new(w, b))
}

fn input(n: usize, seed: u64) -> DVector<f64> {
    DVector::from_fn(n, |i, _| ((i as f64 + 1.0) * (0.61 + seed as f64 * 0.013)).sin())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_moments_match_quadrature(act in activation(), log_k in -3.0f64..1.0) {
        let k = 10f64.powf(log_k);
        for kind in MomentKind::ALL {
            let c = moment_closed(act, kind, k).unwrap();
            let q = moment_quadrature(act, kind, k, 120).unwrap();
            prop_assert!((c - q).abs() <= 1e-8 * c.abs().max(1.0), "{act} {kind:?} K={k}: {c} vs {q}");
        }
    }

    #[test]
    fn kernel_map_stays_nonnegative(act in activation(), mode in mode(), hp in hyper(), k in 0.0f64..20.0) {
        let next = kernel_step(act, mode, hp, k);
        prop_assert!(next >= 0.0 && next.is_finite());
    }

    #[test]
    fn ln_kernels_are_constant_after_the_first_layer(act in activation(), hp in hyper(), k1 in 0.01f64..5.0) {
        for mode in [NormMode::PreLn, NormMode::PostLn] {
            let t = trace(act, mode, hp, 6, k1, 0).unwrap();
            for l in 3..=6 {
                prop_assert!((t.k(l).unwrap() - t.k(2).unwrap()).abs() <= 1e-12 * t.k(2).unwrap().max(1.0));
            }
        }
        let post = trace(act, NormMode::PostLn, hp, 3, k1, 0).unwrap();
        prop_assert!((post.k(2).unwrap() - hp.weight_var - hp.bias_var).abs() <= 1e-12);
    }

    // J^{l0,l} = J^{l0,l0+1} · Π χ^{l'} for l0 < l' < l.
    #[test]
    fn theory_jacobian_is_multiplicative(act in activation(), mode in mode(), hp in hyper(), l0 in 1usize..4) {
        let t = trace(act, mode, hp, 12, 1.0, l0).unwrap();
        prop_assume!(!t.diverged());
        let mut j = t.j(l0 + 1).unwrap();
        for l in l0 + 2..=t.layers() {
            j *= t.chi(l - 1).unwrap();
            prop_assert!((t.j(l).unwrap() - j).abs() <= 1e-12 * j.abs().max(1e-300));
        }
    }

    #[test]
    fn relu_pre_ln_chi_formula(w in 0.3f64..3.0, b in 0.0f64..2.0) {
        let chi = chi_star(Activation::relu(), NormMode::PreLn, Hyper::new(w, b), 1.0).unwrap();
        prop_assert!((chi - w * w / (w * w + 2.0 * b * b)).abs() <= 1e-12);
    }

    #[test]
    fn fixed_points_are_fixed(act in activation(), hp in hyper(), k1 in 0.01f64..5.0) {
        let fp = fixed_point(act, NormMode::Vanilla, hp, k1).unwrap();
        prop_assume!(fp.converged && !fp.diverged);
        let next = kernel_step(act, NormMode::Vanilla, hp, fp.k_star);
        prop_assert!((next - fp.k_star).abs() <= 1e-9 * fp.k_star.max(1.0));
    }

    #[test]
    fn power_law_fit_recovers_exponent(zeta in 0.0f64..3.0, amp in 0.01f64..100.0) {
        let series: Vec<(usize, f64)> = (1..=200).map(|l| (l, amp * (l as f64).powf(-zeta))).collect();
        let fit = fit_power_law(&series, 50).unwrap();
        prop_assert!((fit.slope + zeta).abs() <= 1e-9);
        prop_assert!((fit.intercept - amp.ln()).abs() <= 1e-8);
    }

    #[test]
    fn exponential_fit_matches_correlation_length(chi in 0.2f64..3.0) {
        prop_assume!((chi - 1.0).abs() > 1e-3);
        let series: Vec<(usize, f64)> = (1..=60).map(|l| (l, 0.7 * chi.powi(l as i32))).collect();
        let fit = fit_exponential(&series, 0).unwrap();
        let xi = correlation_length(chi).unwrap();
        prop_assert!((fit.xi - xi).abs() <= 1e-8 * xi);
        prop_assert_eq!(fit.phase, if chi < 1.0 { Phase::Ordered } else { Phase::Chaotic });
    }

    #[test]
    fn normalized_layers_are_standardized(
        act in activation(),
        mode in prop_oneof![Just(NormMode::PreLn), Just(NormMode::PostLn)],
        hp in hyper(),
        groups in prop_oneof![Just(1usize), Just(2), Just(4)],
        seed in 0u64..1000,
    ) {
        let params = NetworkParams::uniform(10, 32, 4, seed, 0).unwrap();
        let model = Model::new(act, hp, mode).with_groups(groups);
        let fwd = forward(&params, &model, &input(10, seed)).unwrap();
        for l in 1..4 {
            let n = fwd.normalized(l).unwrap();
            for g in n.as_slice().chunks(32 / groups) {
                let m = g.len() as f64;
                let mean = g.iter().sum::<f64>() / m;
                let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
                prop_assert!(mean.abs() <= 1e-12);
                // a group whose values all coincide normalizes to zeros
                prop_assert!((var - 1.0).abs() <= 1e-9 || var <= 1e-9, "variance {var}");
            }
        }
    }

    #[test]
    fn profile_matches_single_jacobians(act in activation(), mode in mode(), hp in hyper(), seed in 0u64..1000, l0 in 0usize..3) {
        let params = NetworkParams::uniform(7, 20, 5, seed, 3).unwrap();
        let model = Model::new(act, hp, mode);
        let x = input(7, seed);
        let profile = partial_jacobian_profile(&params, &model, &x, l0).unwrap();
        for (i, &j) in profile.iter().enumerate() {
            let single = partial_jacobian_norm(&params, &model, &x, l0, l0 + 1 + i).unwrap();
            prop_assert_eq!(j, single);
        }
    }

    #[test]
    fn seeded_networks_are_reproducible(seed in any::<u64>(), member in any::<u64>()) {
        let a = NetworkParams::uniform(5, 6, 3, seed, member).unwrap();
        let b = NetworkParams::uniform(5, 6, 3, seed, member).unwrap();
        prop_assert_eq!(a.materialize(), b.materialize());
        let other = NetworkParams::uniform(5, 6, 3, seed, member.wrapping_add(1)).unwrap();
        prop_assert_ne!(a.layer(1).weights.clone(), other.layer(1).weights.clone());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ensembles_are_schedule_independent(
        act in activation(),
        mode in mode(),
        hp in hyper(),
        seed in 0u64..1_000_000,
        projected in any::<bool>(),
    ) {
        let mut cfg = EnsembleConfig::new(Model::new(act, hp, mode), 24, 6);
        cfg.n_init = 6;
        cfg.seed = seed;
        cfg.sampler = if projected { Sampler::Projected } else { Sampler::Dense };
        cfg.exec = Execution::Sequential;
        let seq = empirical_chi(&cfg).unwrap();
        cfg.exec = Execution::Parallel;
        let par = empirical_chi(&cfg).unwrap();
        prop_assert_eq!(seq, par);
    }
}
