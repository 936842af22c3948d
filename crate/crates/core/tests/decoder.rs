use zakai_core::decoder::*;

fn linear(a1: f64, sigma_x: f64, b1: f64, c_x: f64) -> Decoder {
    Decoder::Linear(LinearDecoderParams { a1, sigma_x, b1, c_x })
}

#[test]
fn linear_coefficients() {
    let d = linear(2.0, 0.1, 1.0, -0.2);
    assert_eq!(d.eval_coeffs(0.0, 0.0, 0.0, 0.5).mu, 1.0);
    assert_eq!(d.eval_coeffs(0.0, 0.0, 0.0, -0.3).lambda, 0.0);
    assert!((d.eval_coeffs(0.0, 0.0, 0.0, 0.3).lambda - 0.3).abs() < 1e-15);
    assert_eq!(d.eval_coeffs(0.0, 0.0, 0.0, 0.3).marks, JumpMarkDist::PointMass { c: -0.2 });
}

#[test]
fn polynomial_drift() {
    let d = Decoder::Poly(PolyDecoderParams {
        drift_coeffs: vec![0.0, 1.0, 1.0],
        vol_coeffs: vec![-1.0],
        intensity_coeffs: vec![0.5, -1.0],
        mark: JumpMarkDist::PointMass { c: 0.3 },
    });
    let c = d.eval_coeffs(0.0, 0.0, 0.0, 2.0);
    assert_eq!(c.mu, 6.0);
    assert!(c.sigma > 0.0);
    assert_eq!(c.lambda, 0.0);
}

#[test]
fn constant_polynomial_is_constant_model() {
    let d = Decoder::Poly(PolyDecoderParams {
        drift_coeffs: vec![0.3],
        vol_coeffs: vec![-2.0],
        intensity_coeffs: vec![1.5],
        mark: JumpMarkDist::PointMass { c: 0.3 },
    });
    let expected = LocalCoeffs { mu: 0.3, sigma: softplus(-2.0), lambda: 1.5 };
    for theta in [-2.0, -0.1, 0.0, 0.7, 2.0] {
        assert_eq!(d.local(1.0, 2.0, 3.0, theta), expected);
    }
}

#[test]
fn poly_positivity_on_grid() {
    let d = Decoder::Poly(PolyDecoderParams {
        drift_coeffs: vec![0.0, 1.0],
        vol_coeffs: vec![-40.0, 5.0, -3.0],
        intensity_coeffs: vec![-1.0, 2.0, -4.0],
        mark: JumpMarkDist::gaussian(0.0, 0.1),
    });
    for theta in zakai_core::grid::LatentGrid::default().nodes() {
        let c = d.local(0.0, 0.0, 0.0, theta);
        assert!(c.sigma > 0.0 && c.lambda >= 0.0);
    }
}

#[test]
fn raw_roundtrip() {
    let d = linear(0.7, 0.12, 1.1, -0.3);
    let back = d.with_raw(&d.to_raw()).unwrap();
    match back {
        Decoder::Linear(p) => {
            assert_eq!(p.a1, 0.7);
            assert!((p.sigma_x - 0.12).abs() < 1e-15);
        }
        _ => unreachable!(),
    }
    assert!(d.with_raw(&[1.0]).is_err());
}

#[test]
fn json_record_is_tagged() {
    let d = linear(1.0, 0.1, 1.5, -0.2);
    let s = serde_json::to_string(&d).unwrap();
    assert!(s.contains("\"family\":\"linear\""));
    let back: Decoder = serde_json::from_str(&s).unwrap();
    assert_eq!(back, d);
    let p = Decoder::Poly(PolyDecoderParams {
        drift_coeffs: vec![1.0],
        vol_coeffs: vec![0.0],
        intensity_coeffs: vec![0.0],
        mark: JumpMarkDist::gaussian(0.0, 0.2),
    });
    let back: Decoder = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
    assert_eq!(back, p);
}

#[test]
fn hermite_rule_moments() {
    for n in [3, 5, 11, 20] {
        let rule = gauss_hermite(n);
        let m = |k: i32| rule.iter().map(|(z, w)| w * z.powi(k)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-12, "n={n} sum {}", m(0));
        assert!(m(1).abs() < 1e-12);
        assert!((m(2) - 1.0).abs() < 1e-12);
        if n >= 3 {
            assert!((m(4) - 3.0).abs() < 1e-10);
        }
    }
    let marks = JumpMarkDist::gaussian(0.4, 0.3);
    let w: f64 = marks.quadrature().iter().map(|a| a.1).sum();
    assert!((w - 1.0).abs() < 1e-12);
}

#[test]
fn small_jump_examples() {
    let s = small_jump_absorb(&JumpMarkDist::PointMass { c: 0.5 }, 3.0, 0.1).unwrap();
    assert_eq!((s.mu_tilde_add, s.var_tilde_add, s.lambda_eps), (0.0, 0.0, 3.0));
    let s = small_jump_absorb(&JumpMarkDist::PointMass { c: 0.05 }, 3.0, 0.1).unwrap();
    assert!((s.mu_tilde_add - 0.15).abs() < 1e-15);
    assert!((s.var_tilde_add - 0.0075).abs() < 1e-15);
    assert_eq!(s.lambda_eps, 0.0);
    assert!(small_jump_absorb(&JumpMarkDist::PointMass { c: 0.05 }, 3.0, 0.0).is_err());
}

/// Composite Simpson integral of `f * N(mean, sd)` over `[lo, hi]`.
fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let x = lo + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

#[test]
fn gaussian_split_against_numerical_integration() {
    let pdf = |m: f64, s: f64| move |z: f64| (-0.5 * ((z - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    // standard normal tail beyond 3
    let s = small_jump_absorb(&JumpMarkDist::gaussian(0.0, 1.0), 1.0, 3.0).unwrap();
    let inside = simpson(pdf(0.0, 1.0), -3.0, 3.0, 20_000);
    assert!((s.lambda_eps - (1.0 - inside)).abs() < 1e-10);
    assert!((s.lambda_eps - 0.0027).abs() < 1e-3);

    let (m, sd, lam, eps) = (0.3, 0.5, 2.0, 0.4);
    let s = small_jump_absorb(&JumpMarkDist::gaussian(m, sd), lam, eps).unwrap();
    let f = pdf(m, sd);
    let m1 = simpson(|z| z * f(z), -eps, eps, 20_000);
    let m2 = simpson(|z| z * z * f(z), -eps, eps, 20_000);
    let p_in = simpson(&f, -eps, eps, 20_000);
    assert!((s.mu_tilde_add - lam * m1).abs() < 1e-10);
    assert!((s.var_tilde_add - lam * m2).abs() < 1e-10);
    assert!((s.lambda_eps - lam * (1.0 - p_in)).abs() < 1e-10);
}

#[test]
fn split_conserves_moments() {
    let (m, sd, lam, eps) = (-0.1, 0.4, 3.0, 0.25);
    let marks = JumpMarkDist::gaussian(m, sd);
    let s = small_jump_absorb(&marks, lam, eps).unwrap();
    let large = large_jump_law(&marks, eps).unwrap();
    // conditional-mean atoms keep the first moment; within-bin spread is lost
    let first = s.mu_tilde_add + s.lambda_eps * large.mean();
    let second = s.var_tilde_add + s.lambda_eps * large.second_moment();
    assert!((first - lam * marks.mean()).abs() < 1e-9, "{first}");
    assert!(second <= lam * marks.second_moment() + 1e-12);
    assert!((second - lam * marks.second_moment()).abs() < 0.01 * lam * marks.second_moment(), "{second}");

    let marks = JumpMarkDist::Discrete { atoms: vec![(-0.5, 0.2), (0.05, 0.5), (0.8, 0.3)] };
    let s = small_jump_absorb(&marks, lam, 0.1).unwrap();
    let large = large_jump_law(&marks, 0.1).unwrap();
    let first = s.mu_tilde_add + s.lambda_eps * large.mean();
    let second = s.var_tilde_add + s.lambda_eps * large.second_moment();
    assert!((first - lam * marks.mean()).abs() < 1e-12);
    assert!((second - lam * marks.second_moment()).abs() < 1e-12);
}

#[test]
fn truncated_model_uses_tilde_coefficients() {
    let d = linear(1.0, 0.1, 2.0, 0.05);
    let om = ObservationModel::new(d.clone(), Some(0.1)).unwrap();
    let c = om.coeffs(0.0, 0.0, 0.0, 1.0);
    assert!((c.mu - (1.0 + 2.0 * 0.05)).abs() < 1e-15);
    assert!((c.sigma - (0.01f64 + 2.0 * 0.0025).sqrt()).abs() < 1e-15);
    assert_eq!(c.lambda, 0.0);
    let raw = ObservationModel::new(d, None).unwrap();
    assert_eq!(raw.coeffs(0.0, 0.0, 0.0, 1.0).lambda, 2.0);
}

#[test]
fn n_fold_laws() {
    let pm = JumpMarkDist::PointMass { c: 0.2 };
    assert_eq!(pm.n_fold(3), vec![(0.6000000000000001, 0.0, 1.0)]);
    let d = JumpMarkDist::Discrete { atoms: vec![(1.0, 0.5), (-1.0, 0.5)] };
    let two = d.n_fold(2);
    assert_eq!(two.len(), 4);
    let w: f64 = two.iter().map(|a| a.2).sum();
    assert!((w - 1.0).abs() < 1e-15);
}

#[test]
fn mark_sampling_moments() {
    let mut rng = zakai_core::rng::stream(1, 0);
    let marks = JumpMarkDist::gaussian(0.5, 0.2);
    let n = 20_000;
    let mean = (0..n).map(|_| marks.sample(&mut rng)).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 4.0 * 0.2 / (n as f64).sqrt());
}

mod properties {
    use proptest::prelude::*;
    use zakai_core::decoder::*;

    proptest! {
        #[test]
        fn length_one_polynomials_match_constant_coefficients(
            mu in -2.0f64..2.0, v in -5.0f64..2.0, lam in 0.0f64..5.0, theta in -2.0f64..2.0, t in 0.0f64..10.0,
        ) {
            let d = Decoder::Poly(PolyDecoderParams {
                drift_coeffs: vec![mu],
                vol_coeffs: vec![v],
                intensity_coeffs: vec![lam],
                mark: JumpMarkDist::PointMass { c: 0.1 },
            });
            let c = d.local(t, 0.3, -0.2, theta);
            prop_assert_eq!(c, LocalCoeffs { mu, sigma: softplus(v), lambda: lam });
        }

        #[test]
        fn coefficients_are_deterministic_and_continuous(
            a1 in -2.0f64..2.0, s in 0.01f64..0.5, b1 in -3.0f64..3.0, theta in -2.0f64..2.0,
        ) {
            let d = Decoder::Linear(LinearDecoderParams { a1, sigma_x: s, b1, c_x: -0.2 });
            prop_assert_eq!(d.local(0.0, 0.0, 0.0, theta), d.local(0.0, 0.0, 0.0, theta));
            let (lo, hi) = (d.local(0.0, 0.0, 0.0, theta - 1e-9), d.local(0.0, 0.0, 0.0, theta + 1e-9));
            prop_assert!((lo.mu - hi.mu).abs() < 1e-8);
            prop_assert!((lo.lambda - hi.lambda).abs() < 1e-8);
            prop_assert!((lo.sigma - hi.sigma).abs() < 1e-12);
        }

        #[test]
        fn split_conserves_the_first_moment(m in -0.5f64..0.5, sd in 0.05f64..0.5, lam in 0.1f64..5.0, eps in 0.01f64..0.6) {
            let marks = JumpMarkDist::gaussian(m, sd);
            let s = small_jump_absorb(&marks, lam, eps).unwrap();
            let large_mean = large_jump_law(&marks, eps).map(|l| l.mean()).unwrap_or(0.0);
            let first = s.mu_tilde_add + s.lambda_eps * large_mean;
            prop_assert!((first - lam * m).abs() < 1e-8, "{} vs {}", first, lam * m);
        }
    }
}
