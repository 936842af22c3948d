use zakai_core::metrics::*;
use zakai_core::Error;

#[test]
fn point_error_examples() {
    assert_eq!(point_errors(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
    assert_eq!(point_errors(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), (1.0, 1.0));
    let (mae, rmse) = point_errors(&[0.0, 0.0], &[1.0, 3.0]).unwrap();
    assert_eq!(mae, 2.0);
    assert!((rmse - 5f64.sqrt()).abs() < 1e-15);
    assert!(matches!(point_errors(&[0.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
}

#[test]
fn crps_examples() {
    assert_eq!(crps_ensemble(&[0.0, 2.0], 1.0).unwrap(), 0.5);
    assert_eq!(crps_ensemble(&[0.7; 5], 1.5).unwrap(), (0.7f64 - 1.5).abs());
    assert!(crps_ensemble(&[], 0.0).is_err());
}

#[test]
fn loglik_examples() {
    // mean 0, unbiased variance 1
    let s = [-1.0, 1.0, 0.0, 0.0, -1.0, 1.0];
    let var: f64 = 4.0 / 5.0;
    let scaled: Vec<f64> = s.iter().map(|x| x / var.sqrt()).collect();
    let ll = loglik_ensemble(&scaled, 0.0, 0.0).unwrap();
    assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-12);
    assert!(loglik_ensemble(&[2.0; 4], 2.0, DEFAULT_VAR_FLOOR).unwrap().is_finite());
    let shifted: Vec<f64> = scaled.iter().map(|x| x + 3.0).collect();
    let ll2 = loglik_ensemble(&shifted, 3.0, 0.0).unwrap();
    assert!((ll - ll2).abs() < 1e-12);
    assert!(loglik_ensemble(&[1.0], 1.0, 1e-6).is_err());
}

#[test]
fn quantile_examples() {
    assert_eq!(quantile(&[5.0, 1.0, 4.0, 2.0, 3.0], 0.5).unwrap(), 3.0);
    assert_eq!(quantile(&[7.0], 0.05).unwrap(), 7.0);
    // position 0.3 * 3 = 0.9 → 1 + 0.9 * (2 − 1)
    assert!((quantile(&[1.0, 2.0, 3.0, 4.0], 0.3).unwrap() - 1.9).abs() < 1e-15);
}

#[test]
fn cov90_examples() {
    let ens = vec![vec![1.0, 2.0, 3.0], vec![0.0, 5.0, 10.0]];
    assert_eq!(cov90(&ens, &[2.0, 5.0]).unwrap(), 1.0);
    assert_eq!(cov90(&ens, &[-1.0, 11.0]).unwrap(), 0.0);
    assert!(cov90(&[], &[]).is_err());
}

#[test]
fn aggregate_weights_pairs_uniformly() {
    let a = score_window(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[1.0, 1.0], 1e-6).unwrap();
    let b = score_window(&[vec![0.0], vec![0.0]], &[4.0], 1e-6).unwrap();
    let r = aggregate(&[a, b]).unwrap();
    assert!((r.mae - 2.0).abs() < 1e-15);
    assert!((r.rmse - 6f64.sqrt()).abs() < 1e-15);
    assert!((r.crps - 2.0).abs() < 1e-15);
    assert_eq!(r.cov90, 0.0);
    let json = serde_json::to_string(&r).unwrap();
    for key in ["MAE", "RMSE", "CRPS", "LogLik", "Cov90"] {
        assert!(json.contains(&format!("\"{key}\"")));
    }
}

mod properties {
    use proptest::prelude::*;
    use zakai_core::metrics::*;

    fn ensemble() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 2..30)
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50)) {
            let (f, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (mae, rmse) = point_errors(&f, &y).unwrap();
            prop_assert!(mae <= rmse * (1.0 + 1e-12));
        }

        #[test]
        fn crps_is_at_most_the_first_term(s in ensemble(), y in -6.0f64..6.0) {
            let first = s.iter().map(|x| (x - y).abs()).sum::<f64>() / s.len() as f64;
            let c = crps_ensemble(&s, y).unwrap();
            prop_assert!(c >= 0.0);
            prop_assert!(c <= first + 1e-12);
        }

        #[test]
        fn degenerate_crps_is_the_absolute_error(x in -5.0f64..5.0, y in -5.0f64..5.0, n in 1usize..40) {
            prop_assert_eq!(crps_ensemble(&vec![x; n], y).unwrap(), (x - y).abs());
        }

        #[test]
        fn scores_ignore_member_order(s in ensemble(), y in -6.0f64..6.0, seed in any::<u64>()) {
            let mut shuffled = s.clone();
            let k = shuffled.len();
            shuffled.rotate_left((seed % k as u64) as usize);
            shuffled.reverse();
            prop_assert_eq!(crps_ensemble(&s, y).unwrap(), crps_ensemble(&shuffled, y).unwrap());
            prop_assert_eq!(cov90(&[s.clone()], &[y]).unwrap(), cov90(&[shuffled.clone()], &[y]).unwrap());
            let (a, b) = (loglik_ensemble(&s, y, 1e-6).unwrap(), loglik_ensemble(&shuffled, y, 1e-6).unwrap());
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn loglik_is_translation_invariant(s in ensemble(), y in -6.0f64..6.0, shift in -3.0f64..3.0) {
            let moved: Vec<f64> = s.iter().map(|x| x + shift).collect();
            let a = loglik_ensemble(&s, y, 1e-6).unwrap();
            let b = loglik_ensemble(&moved, y + shift, 1e-6).unwrap();
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }
}
