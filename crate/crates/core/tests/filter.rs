use zakai_core::filter::*;
use zakai_core::decoder::{Decoder, LinearDecoderParams};
use zakai_core::grid::{posterior_mean, posterior_mode};
use zakai_core::{BeliefDensity, LatentGrid, LatentParams, ObservationModel};

fn model(a1: f64, sigma_x: f64, b1: f64, c_x: f64) -> ObservationModel {
    ObservationModel::new(Decoder::Linear(LinearDecoderParams { a1, sigma_x, b1, c_x }), None).unwrap()
}

fn ctx() -> StepContext {
    StepContext { t: 0.0, x: 0.0, beta: 0.0 }
}

fn static_lp() -> LatentParams {
    LatentParams { kappa: 0.0, theta_bar: 0.0, sigma_theta: 0.0 }
}

#[test]
fn static_kernel_is_identity() {
    let grid = LatentGrid::new(-1.0, 1.0, 21).unwrap();
    let k = build_kernel(&static_lp(), 0.01, &grid).unwrap();
    let d = grid.delta_theta();
    for i in 0..21 {
        for j in 0..21 {
            let expect = if i == j { 1.0 / d } else { 0.0 };
            assert!((k.entry(i, j) - expect).abs() < 1e-9);
        }
    }
}

#[test]
fn kernel_rows_are_stochastic_and_centered() {
    let grid = LatentGrid::default();
    let lp = LatentParams { kappa: 0.0, theta_bar: 0.0, sigma_theta: 0.5 };
    let k = build_kernel(&lp, 0.04, &grid).unwrap();
    let d = grid.delta_theta();
    for i in 0..grid.len() {
        assert!((k.row_mass(i) - 1.0).abs() < 1e-10);
    }
    // compare with the CDF-difference discretization of the same Gaussian
    let law = statrs::distribution::Normal::new(0.0, 0.1).unwrap();
    use statrs::distribution::ContinuousCDF;
    for i in 50..350 {
        let th = grid.node(i);
        let mean: f64 = (0..grid.len()).map(|j| grid.node(j) * k.entry(i, j) * d).sum();
        let cdf_mean: f64 = (0..grid.len())
            .map(|j| {
                let z = grid.node(j) - th;
                grid.node(j) * (law.cdf(z + d / 2.0) - law.cdf(z - d / 2.0))
            })
            .sum();
        assert!((mean - th).abs() < 2.0 * d);
        assert!((mean - cdf_mean).abs() < 2.0 * d);
    }
    for lp in [LatentParams::default(), LatentParams { kappa: 3.0, theta_bar: 1.5, sigma_theta: 0.01 }] {
        let k = build_kernel(&lp, 0.01, &grid).unwrap();
        for i in 0..grid.len() {
            assert!((k.row_mass(i) - 1.0).abs() < 1e-10);
        }
    }
    assert!(build_kernel(&lp, 0.0, &grid).is_err());
}

#[test]
fn a_step_examples() {
    let grid = LatentGrid::new(-1.0, 1.0, 41).unwrap();
    let k = build_kernel(&static_lp(), 0.01, &grid).unwrap();
    let r = ResidualCorrection::disabled(&grid);
    let q = BeliefDensity::gaussian(grid, 0.2, 0.3).unwrap();
    let out = a_step(&q, &k, &r).unwrap();
    assert!(out.l1_distance(&q) < 1e-12);

    let grid = LatentGrid::default();
    let k = build_kernel(&LatentParams { kappa: 0.0, theta_bar: 0.0, sigma_theta: 0.3 }, 0.01, &grid).unwrap();
    let u = BeliefDensity::uniform(grid);
    let out = a_step(&u, &k, &ResidualCorrection::disabled(&grid)).unwrap();
    // boundary folding only disturbs a few rows at each edge
    for (a, b) in out.values().iter().zip(u.values()).skip(40).take(321) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(out.l1_distance(&u) < 1e-2, "{}", out.l1_distance(&u));
}

#[test]
fn a_step_with_residual() {
    let grid = LatentGrid::new(0.0, 1.0, 3).unwrap();
    let d = grid.delta_theta();
    let k = build_kernel(&static_lp(), 0.01, &grid).unwrap();
    let q = BeliefDensity::uniform(grid);
    let delta = 0.2;
    let r = ResidualCorrection::new(vec![delta / d, -delta / d, 0.0], &grid).unwrap();
    assert!(r.mass(&grid).abs() < 1e-10);
    // after projection the residual is (δ/Δθ - m, -δ/Δθ - m, -m) with m = 0
    let out = a_step(&q, &k, &r).unwrap();
    let base = 1.0 / (3.0 * d);
    let raw = [base + delta / d, base - delta / d, base];
    let mass: f64 = raw.iter().map(|v: &f64| v.max(0.0)).sum::<f64>() * d;
    for (o, r) in out.values().iter().zip(raw) {
        assert!((o - r.max(0.0) / mass).abs() < 1e-12);
    }
}

#[test]
fn b_step_examples() {
    let grid = LatentGrid::new(-1.0, 1.0, 41).unwrap();
    let q = BeliefDensity::gaussian(grid, 0.1, 0.4).unwrap();
    let flat = model(0.0, 0.2, 0.0, 0.0);
    let out = b_step(&q, 0.3, &flat, ctx(), 0.01).unwrap();
    assert!(out.l1_distance(&q) < 1e-12);

    let two = LatentGrid::new(0.0, 1.0, 2).unwrap();
    let prior = BeliefDensity::uniform(two);
    let out = b_step(&prior, 1.0, &model(1.0, 1.0, 0.0, 0.0), ctx(), 1.0).unwrap();
    let p = out.probabilities();
    assert!((p[0] - 0.3775).abs() < 1e-3 && (p[1] - 0.6225).abs() < 1e-3);

    let u = BeliefDensity::uniform(grid);
    let out = b_step(&u, 0.0, &model(1.0, 0.1, 0.0, 0.0), ctx(), 0.01).unwrap();
    let v = out.values();
    for j in 0..41 {
        assert!((v[j] - v[40 - j]).abs() < 1e-12);
    }
}

#[test]
fn c_step_examples() {
    let grid = LatentGrid::new(-1.0, 1.0, 41).unwrap();
    let q = BeliefDensity::gaussian(grid, 0.0, 0.5).unwrap();
    let no_jumps = model(1.0, 0.1, 0.0, -0.2);
    for dx in [-0.3, 0.0, 0.05] {
        let c = c_step(&q, dx, &no_jumps, ctx(), 0.005).unwrap();
        let b = b_step(&q, dx, &no_jumps, ctx(), 0.005).unwrap();
        assert!(c.l1_distance(&b) < 1e-12);
    }

    // λ = (0, 10) on nodes (0, 1), point-mass marks at c
    let two = LatentGrid::new(0.0, 1.0, 2).unwrap();
    let prior = BeliefDensity::uniform(two);
    let m = model(0.0, 0.1, 10.0, 0.5);
    let out = c_step(&prior, 0.5, &m, ctx(), 0.005).unwrap();
    assert!(out.probabilities()[1] > prior.probabilities()[1]);
}

#[test]
fn c_step_approaches_b_step_linearly() {
    let grid = LatentGrid::new(-1.0, 1.0, 81).unwrap();
    let q = BeliefDensity::gaussian(grid, 0.3, 0.4).unwrap();
    let m = model(1.0, 0.2, 2.0, -0.2);
    let consts: Vec<f64> = [1e-2f64, 1e-3, 1e-4]
        .iter()
        .map(|h| {
            let dx = 0.01 * h.sqrt();
            let c = c_step(&q, dx, &m, ctx(), *h).unwrap();
            let b = b_step(&q, dx, &m, ctx(), *h).unwrap();
            c.l1_distance(&b) / h
        })
        .collect();
    assert!(consts.iter().all(|c| c.is_finite() && *c > 0.0));
    let (lo, hi) = consts.iter().fold((f64::INFINITY, 0.0f64), |(a, b), c| (a.min(*c), b.max(*c)));
    assert!(hi / lo < 1.5, "{consts:?}");
}

#[test]
fn reweightings_commute() {
    let grid = LatentGrid::default();
    let q = BeliefDensity::gaussian(grid, -0.2, 0.5).unwrap();
    let m = model(1.2, 0.15, 1.5, -0.25);
    let h = 0.005;
    for dx in [-0.2, -0.01, 0.0, 0.03] {
        let bc = b_step(&c_step(&q, dx, &m, ctx(), h).unwrap(), dx, &m, ctx(), h).unwrap();
        let cb = c_step(&b_step(&q, dx, &m, ctx(), h).unwrap(), dx, &m, ctx(), h).unwrap();
        assert!(bc.l1_distance(&cb) < 1e-12);
    }
}

#[test]
fn exact_oracle_examples() {
    let grid = LatentGrid::new(-1.0, 1.0, 81).unwrap();
    let q = BeliefDensity::gaussian(grid, 0.2, 0.4).unwrap();
    let no_jumps = model(1.0, 0.1, 0.0, 0.3);
    let b = b_step(&q, 0.02, &no_jumps, ctx(), 0.01).unwrap();
    for kmax in [1, 2, 8] {
        let e = exact_c_oracle(&q, 0.02, &no_jumps, ctx(), 0.01, kmax).unwrap();
        assert!(e.l1_distance(&b) < 1e-12);
    }
    let m = model(1.0, 0.1, 3.0, -0.2);
    let h = 0.01;
    let c = c_step(&q, -0.1, &m, ctx(), h).unwrap();
    let e1 = exact_c_oracle(&q, -0.1, &m, ctx(), h, 1).unwrap();
    let lam_max = 3.0;
    assert!(e1.l1_distance(&c) < (lam_max * h) * (lam_max * h));
    let e = exact_c_oracle(&q, -0.1, &m, ctx(), h, 12).unwrap();
    assert!(e.l1_distance(&c) <= (lam_max * h) * (lam_max * h));
}

#[test]
fn strang_static_is_identity() {
    let grid = LatentGrid::new(-1.0, 1.0, 41).unwrap();
    let k = build_kernel(&static_lp(), 0.01, &grid).unwrap();
    for mode in [SplitMode::Geometric, SplitMode::HalfStep] {
        let f = ZakaiFilter::new(k.clone(), model(0.0, 0.2, 0.0, 0.0)).with_mode(mode);
        let s = FilterState::new(BeliefDensity::gaussian(grid, 0.1, 0.3).unwrap(), 0.0, 0.0).unwrap();
        let s2 = f.strang_update(&s, 0.04).unwrap();
        assert!(s2.q.l1_distance(&s.q) < 1e-10);
        assert_eq!(s2.k, 1);
    }
}

#[test]
fn strang_composition_order() {
    let grid = LatentGrid::default();
    let lp = LatentParams::default();
    let dt = 0.01;
    let k = build_kernel(&lp, dt, &grid).unwrap();
    let r = ResidualCorrection::disabled(&grid);
    let q0 = BeliefDensity::gaussian(grid, 0.3, 0.4).unwrap();
    let state = FilterState::new(q0.clone(), 0.0, 0.0).unwrap();
    let dx = 0.02;

    // half-step variant: C_h B_h A B_h C_h with verbatim substeps
    let m = model(1.0, 0.1, 1.5, -0.2);
    let f = ZakaiFilter::new(k.clone(), m.clone()).with_mode(SplitMode::HalfStep);
    let c = ctx();
    let manual = c_step(&q0, dx, &m, c, dt / 2.0).unwrap();
    let manual = b_step(&manual, dx, &m, c, dt / 2.0).unwrap();
    let manual = a_step(&manual, &k, &r).unwrap();
    let manual = b_step(&manual, dx, &m, c, dt / 2.0).unwrap();
    let manual = c_step(&manual, dx, &m, c, dt / 2.0).unwrap();
    let out = f.strang_update(&state, dx).unwrap();
    assert!(out.q.l1_distance(&manual) < 1e-12);

    // geometric variant with λ = 0: B ∘ A ∘ B where B carries N(dx; μΔt, σ²Δt)^{1/2}
    let m = model(1.0, 0.1, 0.0, -0.2);
    let f = ZakaiFilter::new(k.clone(), m.clone());
    let half: Vec<f64> = grid
        .nodes()
        .map(|th| 0.5 * log_b_likelihood(m.coeffs(0.0, 0.0, 0.0, th), dx, dt))
        .collect();
    let manual = reweight_log(q0.values(), &half, &grid).unwrap();
    let manual = a_step(&manual, &k, &r).unwrap();
    let manual = reweight_log(manual.values(), &half, &grid).unwrap();
    let out = f.strang_update(&state, dx).unwrap();
    assert!(out.q.l1_distance(&manual) < 1e-12);
}

#[test]
fn filter_window_examples() {
    let grid = LatentGrid::default();
    let k = build_kernel(&static_lp(), 0.01, &grid).unwrap();
    let f = ZakaiFilter::new(k, model(1.0, 0.1, 0.0, 0.0));
    let ctx_obs = vec![0.5; 60];
    let (state, betas) = f.filter_window(&ctx_obs, &BeliefDensity::uniform(grid)).unwrap();
    assert_eq!(betas.len(), 60);
    assert_eq!(state.k, 59);
    let (_, trace) = f.filter_window_trace(&ctx_obs, &BeliefDensity::uniform(grid), None).unwrap();
    let mut last_var = f64::INFINITY;
    let mut q = BeliefDensity::uniform(grid);
    let mut s = FilterState::new(q.clone(), 0.0, 0.5).unwrap();
    for _ in 0..59 {
        s = f.strang_update(&s, 0.0).unwrap();
        q = s.q.clone();
        let v = zakai_core::grid::posterior_variance(&q).unwrap();
        assert!(v < last_var);
        last_var = v;
    }
    assert!(posterior_mean(&q).unwrap().abs() < 1e-10);
    assert_eq!(trace.rows.len(), 60);

    let (s2, b2) = f.filter_window(&[0.0, 0.1], &BeliefDensity::uniform(grid)).unwrap();
    assert_eq!((s2.k, b2.len()), (1, 2));
    let one = f.strang_update(&FilterState::new(BeliefDensity::uniform(grid), 0.0, 0.0).unwrap(), 0.1).unwrap();
    assert_eq!(one.q, s2.q);

    let path: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin() * 0.2).collect();
    let a = f.filter_window(&path, &BeliefDensity::uniform(grid)).unwrap();
    let b = f.filter_window(&path, &BeliefDensity::uniform(grid)).unwrap();
    assert_eq!(a.0.q.values(), b.0.q.values());
    assert_eq!(a.1, b.1);
    assert!(f.filter_window(&[0.0], &BeliefDensity::uniform(grid)).is_err());
}

#[test]
fn trace_csv() {
    let grid = LatentGrid::new(-1.0, 1.0, 5).unwrap();
    let k = build_kernel(&LatentParams::default(), 0.01, &grid).unwrap();
    let f = ZakaiFilter::new(k, model(1.0, 0.1, 1.0, -0.2));
    let (_, trace) = f.filter_window_trace(&[0.0, 0.01, 0.0], &BeliefDensity::uniform(grid), Some(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("trace.csv");
    trace.write_csv(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("k,beta,post_mean,post_mode\n"));
    assert_eq!(text.lines().count(), 4);
    let p = dir.path().join("snap.csv");
    trace.write_snapshots_csv(&p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1 + 3 * 5);
}

#[test]
fn log_space_survives_extreme_increments() {
    let grid = LatentGrid::default();
    let q = BeliefDensity::uniform(grid);
    let m = model(1.0, 0.01, 0.0, 0.0);
    let out = b_step(&q, 50.0, &m, ctx(), 0.005).unwrap();
    assert!((out.mass() - 1.0).abs() < 1e-12);
    assert!(posterior_mode(&out).unwrap() > 1.99);
}

mod properties {
    use proptest::prelude::*;
    use zakai_core::decoder::{Decoder, LinearDecoderParams};
    use zakai_core::filter::*;
    use zakai_core::{BeliefDensity, LatentGrid, LatentParams, ObservationModel};

    fn valid(q: &BeliefDensity) -> bool {
        q.values().iter().all(|v| *v >= 0.0 && v.is_finite()) && (q.mass() - 1.0).abs() < 1e-12
    }

    fn setup() -> impl Strategy<Value = (f64, f64, f64, f64, f64, f64, f64)> {
        (-1.5f64..1.5, 0.05f64..0.8, -2.0f64..2.0, 0.02f64..0.4, -3.0f64..3.0, -0.4f64..0.4, -0.3f64..0.3)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn every_substep_returns_a_normalized_density((mean, sd, a1, s, b1, c, dx) in setup()) {
            let grid = LatentGrid::new(-2.0, 2.0, 101).unwrap();
            let q = BeliefDensity::gaussian(grid, mean, sd).unwrap();
            let m = ObservationModel::new(Decoder::Linear(LinearDecoderParams { a1, sigma_x: s, b1, c_x: c }), None).unwrap();
            let ctx = StepContext { t: 0.0, x: 0.0, beta: 0.0 };
            let k = build_kernel(&LatentParams::default(), 0.01, &grid).unwrap();
            let r = ResidualCorrection::disabled(&grid);
            prop_assert!(valid(&a_step(&q, &k, &r).unwrap()));
            prop_assert!(valid(&b_step(&q, dx, &m, ctx, 0.005).unwrap()));
            prop_assert!(valid(&c_step(&q, dx, &m, ctx, 0.005).unwrap()));
            let f = ZakaiFilter::new(k, m);
            let st = FilterState::new(q, 0.0, 0.0).unwrap();
            prop_assert!(valid(&f.strang_update(&st, dx).unwrap().q));
        }

        #[test]
        fn b_and_c_reweightings_commute((mean, sd, a1, s, b1, c, dx) in setup()) {
            let grid = LatentGrid::new(-2.0, 2.0, 101).unwrap();
            let q = BeliefDensity::gaussian(grid, mean, sd).unwrap();
            let m = ObservationModel::new(Decoder::Linear(LinearDecoderParams { a1, sigma_x: s, b1, c_x: c }), None).unwrap();
            let ctx = StepContext { t: 0.0, x: 0.0, beta: 0.0 };
            let h = 0.005;
            let bc = b_step(&c_step(&q, dx, &m, ctx, h).unwrap(), dx, &m, ctx, h).unwrap();
            let cb = c_step(&b_step(&q, dx, &m, ctx, h).unwrap(), dx, &m, ctx, h).unwrap();
            prop_assert!(bc.l1_distance(&cb) < 1e-12);
        }
    }
}
