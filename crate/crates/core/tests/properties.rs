use std::f64::consts::TAU;

use contact_hj::action_dp::{forward_action, ActionParams};
use contact_hj::characteristics::{flow, CharacteristicState};
use contact_hj::ergodic::{
    classify, default_probes, estimate_interval, forward_limit, maxmin_cr, minmax_cl, ErgodicConfig,
    OptimizerConfig, Outcome,
};
use contact_hj::grid::torus_distance;
use contact_hj::hamiltonian::{legendre, HamiltonianModel};
use contact_hj::semigroup::{evolve, Direction, Propagator, Scheme, SemigroupConfig, StopRule};
use contact_hj::{build_model, GridFunction, ModelSpec, TorusGrid};
use proptest::prelude::*;

fn catalog() -> Vec<HamiltonianModel> {
    [
        ModelSpec::new("quadratic"),
        ModelSpec::new("quadratic_plus_f").with_text("f", "tanh"),
        ModelSpec::new("quadratic_plus_f").with_text("f", "sin"),
        ModelSpec::new("linear_in_u").with_number("factor_mean", 1.5).with_list("factor_sin", &[0.5]),
        ModelSpec::new("mechanical").with_list("potential_cos", &[0.5]).with_text("f", "atan"),
    ]
    .iter()
    .map(|s| build_model(s, 1).unwrap())
    .collect()
}

fn tanh() -> HamiltonianModel {
    build_model(&ModelSpec::new("quadratic_plus_f").with_text("f", "tanh"), 1).unwrap()
}

/// `c0 + sum_k a_k cos(2 pi k x) + b_k sin(2 pi k x)`.
fn profile(grid: TorusGrid, coef: &[f64]) -> GridFunction {
    GridFunction::from_fn(grid, |x| {
        coef[0]
            + coef[1..]
                .chunks(2)
                .enumerate()
                .map(|(k, ab)| {
                    let w = TAU * (k + 1) as f64;
                    ab[0] * (w * x[0]).cos() + ab[1] * (w * x[0]).sin()
                })
                .sum::<f64>()
    })
    .unwrap()
}

fn coefficients(amp: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-amp..amp, 7)
}

/// Golden-section maximum of a concave function on `[a, b]`.
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - r * (b - a), a + r * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-11 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    f(0.5 * (a + b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fenchel_young(idx in 0usize..5, x in 0.0..1.0f64, u in -2.0..2.0f64, v in -3.0..3.0f64, p in -3.0..3.0f64) {
        let m = &catalog()[idx];
        let (x, v, p) = ([x, 0.0], [v, 0.0], [p, 0.0]);
        let l = m.lagrangian(x, u, v).unwrap();
        prop_assert!(l >= p[0] * v[0] - m.h(x, u, p) - 1e-12);
        let leg = legendre(m, x, u, v, None).unwrap();
        let at_max = leg.argmax[0] * v[0] - m.h(x, u, leg.argmax);
        prop_assert!((l - at_max).abs() < 1e-8);
    }

    #[test]
    fn closed_form_matches_numeric(idx in 0usize..5, x in 0.0..1.0f64, u in -2.0..2.0f64, v in -3.0..3.0f64) {
        let m = &catalog()[idx];
        let exact = m.lagrangian([x, 0.0], u, [v, 0.0]).unwrap();
        let numeric = legendre(m, [x, 0.0], u, [v, 0.0], None).unwrap().value;
        prop_assert!((exact - numeric).abs() < 1e-8, "{exact} vs {numeric}");
    }

    #[test]
    fn lambda_bound_dominates_du(idx in 0usize..5, x in 0.0..1.0f64, u in -5.0..5.0f64, v in -3.0..3.0f64) {
        let m = &catalog()[idx];
        prop_assert!(m.lagrangian_du([x, 0.0], u, [v, 0.0]).abs() <= m.lambda_bound() + 1e-9);
    }

    #[test]
    fn interpolation_reproduces_nodes(coef in coefficients(1.0), i in 0usize..32) {
        let g = TorusGrid::new(1, 32).unwrap();
        let f = profile(g, &coef);
        prop_assert_eq!(f.interpolate(g.node(i)), f.values()[i]);
    }

    #[test]
    fn differences_ignore_constants(coef in coefficients(1.0), k in -10.0..10.0f64) {
        let g = TorusGrid::new(1, 32).unwrap();
        let f = profile(g, &coef);
        let (a, b) = (f.diff_ops(), f.shifted(k).diff_ops());
        for (x, y) in a.centered.iter().zip(&b.centered) {
            prop_assert!((x[0] - y[0]).abs() <= 1e-9 * (1.0 + k.abs()) * 32.0);
        }
        for (x, y) in a.forward.iter().zip(&b.forward) {
            prop_assert!((x[0] - y[0]).abs() <= 1e-9 * (1.0 + k.abs()) * 32.0);
        }
    }

    #[test]
    fn sup_metrics_antisymmetric(c1 in coefficients(1.0), c2 in coefficients(1.0)) {
        let g = TorusGrid::new(1, 32).unwrap();
        let (f, h) = (profile(g, &c1), profile(g, &c2));
        let (a, b) = (f.sup_metrics(&h).unwrap(), h.sup_metrics(&f).unwrap());
        prop_assert_eq!(a.sup_norm_diff, b.sup_norm_diff);
        prop_assert_eq!(a.min_diff, -b.max_diff);
        prop_assert_eq!(a.max_diff, -b.min_diff);
    }

    #[test]
    fn time_reversal(x in 0.0..1.0f64, u in -1.0..1.0f64, p in -1.0..1.0f64, t in 0.1..2.0f64) {
        let m = tanh();
        let s0 = CharacteristicState::new([x, 0.0], u, [p, 0.0]);
        let t = (t / 1e-3).round() * 1e-3;
        let end = *flow(&m, &s0, t, 1e-3, 0.2).unwrap().last().unwrap();
        let back = *flow(&m, &end, -t, 1e-3, 0.2).unwrap().last().unwrap();
        prop_assert!(torus_distance(back.x, s0.x, 1) < 1e-8);
        prop_assert!((back.u - s0.u).abs() < 1e-8 && (back.p[0] - s0.p[0]).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn one_step_operators_are_monotone(
        idx in 0usize..5,
        base in coefficients(1.0),
        bump in prop::collection::vec(0.0..0.5f64, 64),
        c in -1.0..1.0f64,
    ) {
        let m = &catalog()[idx];
        let g = TorusGrid::new(1, 64).unwrap();
        let prop_sl = Propagator::new(m, &g, SemigroupConfig::defaults(m, c)).unwrap();
        let lo = profile(g, &base);
        let hi = GridFunction::from_values(g, lo.values().iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
        for dir in [Direction::Backward, Direction::Forward] {
            let (a, b) = (prop_sl.step(dir, &lo).unwrap(), prop_sl.step(dir, &hi).unwrap());
            prop_assert!(a.values().iter().zip(b.values()).all(|(x, y)| x <= y), "{dir:?}");
        }
    }

    #[test]
    fn lax_friedrichs_is_monotone_on_moderate_slopes(
        base in coefficients(0.05),
        bump in prop::collection::vec(0.0..1e-3f64, 64),
    ) {
        let m = tanh();
        let g = TorusGrid::new(1, 64).unwrap();
        let cfg = SemigroupConfig { scheme: Scheme::LaxFriedrichs, dt: 3e-3, ..SemigroupConfig::defaults(&m, 0.0) };
        let lf = Propagator::new(&m, &g, cfg).unwrap();
        let lo = profile(g, &base);
        let hi = GridFunction::from_values(g, lo.values().iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
        for dir in [Direction::Backward, Direction::Forward] {
            let (a, b) = (lf.step(dir, &lo).unwrap(), lf.step(dir, &hi).unwrap());
            prop_assert!(a.values().iter().zip(b.values()).all(|(x, y)| x <= y));
        }
    }

    #[test]
    fn action_is_strictly_monotone_in_u0(x0 in 0.0..1.0f64, u0 in -1.0..1.0f64, du in 1e-4..1.0f64, k in 8usize..30) {
        let m = tanh();
        let g = TorusGrid::new(1, 64).unwrap();
        let p = ActionParams::new([x0, 0.0], u0, 0.1, 0.02, k, 4.0);
        let a = forward_action(&m, &g, p).unwrap();
        let b = forward_action(&m, &g, ActionParams { u0: u0 + du, ..p }).unwrap();
        prop_assert!(a.layer_values(k).iter().zip(b.layer_values(k)).all(|(x, y)| x < y));
    }

    #[test]
    fn action_is_strictly_monotone_in_the_lagrangian(x0 in 0.0..1.0f64, dc in 1e-3..1.0f64, k in 8usize..30) {
        // the level c enters as L + c
        let m = tanh();
        let g = TorusGrid::new(1, 64).unwrap();
        let p = ActionParams::new([x0, 0.0], 0.0, 0.0, 0.02, k, 4.0);
        let a = forward_action(&m, &g, p).unwrap();
        let b = forward_action(&m, &g, ActionParams { c: dc, ..p }).unwrap();
        prop_assert!(a.layer_values(k).iter().zip(b.layer_values(k)).all(|(x, y)| x < y));
    }
}

#[test]
fn double_legendre_recovers_h() {
    let g = TorusGrid::new(1, 8).unwrap();
    for m in catalog() {
        let numeric = m.clone().without_closed_form();
        for (i, p) in [-2.0, -0.7, 0.0, 0.4, 1.9].into_iter().enumerate() {
            let x = g.node(i);
            let u = 0.3 * i as f64 - 0.5;
            let l = |v: f64| numeric.lagrangian_value(x, u, [v, 0.0]).unwrap();
            let h = golden_max(|v| p * v - l(v), -12.0, 12.0);
            let exact = m.h(x, u, [p, 0.0]);
            assert!((h - exact).abs() < 1e-6, "{}: p = {p}: {h} vs {exact}", m.name());
        }
    }
}

#[test]
fn converged_limit_is_a_discrete_fixed_point() {
    let m = tanh();
    let g = TorusGrid::new(1, 128).unwrap();
    let prop = Propagator::new(&m, &g, SemigroupConfig::defaults(&m, 0.3)).unwrap();
    let w0 = profile(g, &[0.5, 1.0, 0.0, 0.0, 0.3, 0.0, 0.0]);
    let rule = StopRule::defaults(&m, &w0);
    let trace = evolve(&prop, &w0, 400.0, &rule, Direction::Backward).unwrap();
    assert!(trace.is_bounded(), "{:?}", trace.stop);
    let step = prop.step_backward(&trace.final_state).unwrap();
    assert!(step.sup_metrics(&trace.final_state).unwrap().sup_norm_diff < rule.tol_conv);

    // the forward limit started from the backward limit is a forward fixed point
    let (fwd, _) = forward_limit(&prop, &trace.final_state, &rule, 400.0).unwrap();
    assert!(fwd.is_bounded(), "{:?}", fwd.stop);
    let fstep = prop.step_forward(&fwd.final_state).unwrap();
    assert!(fstep.sup_metrics(&fwd.final_state).unwrap().sup_norm_diff < 2.0 * rule.tol_conv);
}

#[test]
fn schemes_agree_on_tanh_limit() {
    let m = tanh();
    let g = TorusGrid::new(1, 64).unwrap();
    let w0 = profile(g, &[0.2, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let rule = StopRule::defaults(&m, &w0);
    let sl_cfg = SemigroupConfig::defaults(&m, 0.0);
    let lf_cfg = SemigroupConfig { scheme: Scheme::LaxFriedrichs, dt: 3e-3, ..sl_cfg };
    let mut limits = Vec::new();
    for cfg in [sl_cfg, lf_cfg] {
        let prop = Propagator::new(&m, &g, cfg).unwrap();
        let t = (60.0 / cfg.dt).round() * cfg.dt;
        let trace = evolve(&prop, &w0, t, &rule, Direction::Backward).unwrap();
        assert!(trace.is_bounded(), "{:?}", cfg.scheme);
        limits.push(trace.final_state);
    }
    let gap = limits[0].sup_metrics(&limits[1]).unwrap().sup_norm_diff;
    assert!(gap <= 5.0 * (g.spacing() + sl_cfg.dt), "{gap}");
}

#[test]
fn classifier_is_monotone_in_c() {
    let m = build_model(&ModelSpec::new("quadratic_plus_f").with_text("f", "sin"), 1).unwrap();
    let g = TorusGrid::new(1, 64).unwrap();
    let cfg = ErgodicConfig::defaults(&m);
    let probes = default_probes(g);
    let rank = |o: Outcome| match o {
        Outcome::DivergesDown => Some(0),
        Outcome::Bounded | Outcome::Periodic => Some(1),
        Outcome::DivergesUp => Some(2),
        Outcome::Inconclusive => None,
    };
    let ranks: Vec<i32> = (-6..=6)
        .filter_map(|k| rank(classify(&m, &g, 0.25 * k as f64, &probes, &cfg).unwrap().outcome))
        .collect();
    assert!(ranks.windows(2).all(|w| w[0] <= w[1]), "{ranks:?}");
    assert_eq!(ranks.first(), Some(&0));
    assert_eq!(ranks.last(), Some(&2));
}

#[test]
fn brackets_are_consistent() {
    let m = tanh();
    let g = TorusGrid::new(1, 64).unwrap();
    let est = estimate_interval(&m, &g, (-2.0, 2.0), 0.1, &default_probes(g), &ErgodicConfig::defaults(&m)).unwrap();
    assert!(est.c_l.hi.unwrap() <= est.c_r.lo.unwrap() + 0.2);
    assert!(est.samples.iter().any(|s| s.marginal));
}

#[test]
fn optimizer_estimates_bracket_known_endpoints() {
    let g = TorusGrid::new(1, 64).unwrap();
    let opt = OptimizerConfig::default();
    for (spec, c_l, c_r) in [
        (ModelSpec::new("quadratic"), 0.0, 0.0),
        (ModelSpec::new("quadratic_plus_f").with_text("f", "tanh"), -1.0, 1.0),
        (ModelSpec::new("quadratic_plus_f").with_text("f", "sin"), -1.0, 1.0),
    ] {
        let m = build_model(&spec, 1).unwrap();
        let lo = minmax_cl(&m, &g, &opt).estimate;
        let hi = maxmin_cr(&m, &g, &opt).estimate;
        assert!((c_l - 0.05..=c_l + 0.1).contains(&lo), "{}: {lo}", m.name());
        assert!((c_r - 0.1..=c_r + 0.05).contains(&hi), "{}: {hi}", m.name());
    }
}
