use zakai_core::grid::*;
use zakai_core::Error;
use proptest::prelude::*;

fn unit_grid() -> LatentGrid {
    LatentGrid::new(0.0, 1.0, 2).unwrap()
}

#[test]
fn grid_spacing_and_nodes() {
    let g = LatentGrid::default();
    assert_eq!(g.len(), 401);
    assert!((g.delta_theta() - 0.01).abs() < 1e-15);
    assert_eq!(g.node(0), -2.0);
    assert!((g.node(400) - 2.0).abs() < 1e-12);
    assert!(g.nodes().collect::<Vec<_>>().windows(2).all(|w| w[1] > w[0]));
    assert_eq!(g.nearest(0.004), 200);
    assert_eq!(g.nearest(-9.0), 0);
    assert_eq!(g.nearest(9.0), 400);
}

#[test]
fn grid_rejects_bad_bounds() {
    assert!(LatentGrid::new(0.0, 1.0, 1).is_err());
    assert!(LatentGrid::new(1.0, 1.0, 5).is_err());
    assert!(LatentGrid::new(f64::NAN, 1.0, 5).is_err());
}

#[test]
fn normalize_examples() {
    let g = unit_grid();
    let q = BeliefDensity::from_values(g, vec![2.0, 2.0]).unwrap();
    assert_eq!(normalize(&q).unwrap().values(), &[0.5, 0.5]);
    let q = BeliefDensity::from_values(g, vec![1.0, 3.0]).unwrap();
    assert_eq!(normalize(&q).unwrap().values(), &[0.25, 0.75]);
    let q = BeliefDensity::from_values(g, vec![0.0, 0.0]).unwrap();
    assert!(matches!(normalize(&q), Err(Error::ZeroMass { .. })));
}

#[test]
fn rejects_negative_values() {
    assert!(BeliefDensity::from_values(unit_grid(), vec![1.0, -1e-3]).is_err());
}

#[test]
fn feature_examples() {
    let g = unit_grid();
    let pi = normalize(&BeliefDensity::from_values(g, vec![1.0, 3.0]).unwrap()).unwrap();
    assert!((belief_feature(&pi, |t| t).unwrap() - 0.75).abs() < 1e-15);
    assert!((posterior_mean(&pi).unwrap() - 0.75).abs() < 1e-15);
    assert_eq!(posterior_mode(&pi).unwrap(), 1.0);

    let g = LatentGrid::default();
    let u = BeliefDensity::uniform(g);
    assert!(posterior_mean(&u).unwrap().abs() < 1e-12);

    let j = g.nearest(1.0);
    let pm = BeliefDensity::point_mass(g, j).unwrap();
    assert!((posterior_mean(&pm).unwrap() - 1.0).abs() < 1e-12);
    assert!((posterior_mode(&pm).unwrap() - 1.0).abs() < 1e-12);
    assert!((belief_feature(&pm, |t| t * t).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn feature_requires_normalized() {
    let q = BeliefDensity::from_values(unit_grid(), vec![1.0, 3.0]).unwrap();
    assert!(matches!(belief_feature(&q, |t| t), Err(Error::NotNormalized)));
    assert!(matches!(posterior_mode(&q), Err(Error::NotNormalized)));
}

#[test]
fn symmetric_density_has_zero_mean() {
    let g = LatentGrid::default();
    let pi = BeliefDensity::gaussian(g, 0.0, 0.4).unwrap();
    assert!(posterior_mean(&pi).unwrap().abs() < 1e-12);
}

#[test]
fn density_csv_dump() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let pi = normalize(&BeliefDensity::from_values(unit_grid(), vec![1.0, 3.0]).unwrap()).unwrap();
    pi.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "theta,value\n0,0.25\n1,0.75\n");
}

fn density_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..10.0, 41).prop_filter("some mass", |v| v.iter().sum::<f64>() > 1e-3)
}

proptest! {
    #[test]
    fn normalize_is_idempotent(v in density_strategy()) {
        let g = LatentGrid::new(-1.0, 1.0, 41).unwrap();
        let once = normalize(&BeliefDensity::from_values(g, v).unwrap()).unwrap();
        let twice = normalize(&once).unwrap();
        prop_assert!(once.l1_distance(&twice) < 1e-14);
        prop_assert!((once.mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn normalize_is_scale_invariant(v in density_strategy(), c in 1e-3f64..1e3) {
        let g = LatentGrid::new(-1.0, 1.0, 41).unwrap();
        let a = normalize(&BeliefDensity::from_values(g, v.clone()).unwrap()).unwrap();
        let scaled = v.iter().map(|x| x * c).collect();
        let b = normalize(&BeliefDensity::from_values(g, scaled).unwrap()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn normalization_stability_bound(v in density_strategy(), w in density_strategy()) {
        let g = LatentGrid::new(-1.0, 1.0, 41).unwrap();
        let q = BeliefDensity::from_values(g, v).unwrap();
        let qt = BeliefDensity::from_values(g, w).unwrap();
        let lhs = normalize(&qt).unwrap().l1_distance(&normalize(&q).unwrap());
        let rhs = 2.0 * qt.l1_distance(&q) / q.mass();
        prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-15);
    }
}
