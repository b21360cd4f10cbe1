mod common;

use balanced_mc::experiments::{generate_instance, kappa_oracle, Setting};
use balanced_mc::pgd::FactorPair;
use balanced_mc::weights::{
    balancing_error, balancing_profile, default_kappa_grid, pool_solutions, relaxed_bound, select_by_percentage,
    solve_weights, WeightOptions, WeightSolution,
};
use balanced_mc::{DenseMatrix, Mask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask_strategy() -> impl Strategy<Value = Mask> {
    (2usize..8, 2usize..8, any::<u64>()).prop_map(|(r, c, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = DenseMatrix::from_fn(r, c, |_, _| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
        t[(rng.random_range(0..r), rng.random_range(0..c))] = 1.0;
        Mask::from_matrix(t).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solutions_are_feasible_and_consistent(mask in mask_strategy(), k in 0.0f64..0.5) {
        let s = solve_weights(&mask, k, &WeightOptions::default()).unwrap();
        for &(i, j) in mask.observed() {
            prop_assert!(s.weights[(i, j)] >= 1.0);
        }
        for i in 0..mask.nrows() {
            for j in 0..mask.ncols() {
                if !mask.is_observed(i, j) {
                    prop_assert_eq!(s.weights[(i, j)], 0.0);
                }
            }
        }
        // the best iterate is never worse than the feasible start W = J
        let start = solve_weights(&mask, k, &WeightOptions { max_iter: 1, ..Default::default() }).unwrap();
        prop_assert!(s.objective <= start.objective + 1e-12);
    }
}

proptest! {
    #[test]
    fn pooled_profiles_are_monotone(cands in prop::collection::vec((0.0f64..10.0, 1.0f64..10.0), 1..12),
                                    mut kappas in prop::collection::vec(0.0f64..1.0, 1..10)) {
        kappas.sort_by(f64::total_cmp);
        let make = |k: f64, h: f64, f: f64| WeightSolution {
            weights: DenseMatrix::zeros(1, 1),
            kappa_prime: k,
            h_value: h,
            frob_tw: f,
            objective: h + k * f * f,
            iterations: 0,
            converged: true,
        };
        let pool: Vec<_> = cands.iter().map(|&(h, f)| make(0.0, h, f)).collect();
        let mut sols: Vec<_> = kappas.iter().zip(cands.iter().cycle()).map(|(&k, &(h, f))| make(k, h, f)).collect();
        let before: Vec<f64> = sols.iter().map(|s| s.objective).collect();
        pool_solutions(&mut sols, &pool);
        for (s, b) in sols.iter().zip(&before) {
            prop_assert!(s.objective <= *b);
            prop_assert!((s.objective - (s.h_value + s.kappa_prime * s.frob_tw * s.frob_tw)).abs() < 1e-9);
        }
        for w in sols.windows(2) {
            if w[0].kappa_prime < w[1].kappa_prime {
                prop_assert!(w[0].h_value <= w[1].h_value + 1e-12);
            }
        }
    }
}

#[test]
fn two_by_two_matches_grid_oracle() {
    let t = Mask::from_indices(2, 2, &[(0, 0), (0, 1), (1, 0)]).unwrap();
    let oracle = common::weight_grid_oracle(&t, &[0.01], 0.01, 5.0)[0];
    let s = solve_weights(&t, 0.01, &WeightOptions::default()).unwrap();
    assert!((s.objective - oracle).abs() <= 5e-3, "{} vs {oracle}", s.objective);
}

#[test]
fn missing_column_forces_root_three() {
    let idx: Vec<_> = (0..3).flat_map(|i| [(i, 0), (i, 1)]).collect();
    let t = Mask::from_indices(3, 3, &idx).unwrap();
    let s = solve_weights(&t, 0.0, &WeightOptions::default()).unwrap();
    let root3 = 3f64.sqrt();
    // the missing column gives ‖X‖ ≥ ‖X e₃‖ = √3, attained at W = J
    assert!(s.h_value >= root3 - 1e-12);
    assert!(s.h_value - root3 <= 1e-3, "h = {}", s.h_value);
}

#[test]
fn profile_examples() {
    let full = Mask::full(3, 3);
    let p = balancing_profile(&full, &[0.0], &WeightOptions::default()).unwrap();
    assert_eq!((p.points.len(), p.points[0].h_value, p.h_max, p.h_min), (1, 0.0, 0.0, 0.0));

    let t = Mask::from_indices(3, 4, &[(0, 0), (1, 1), (2, 2), (0, 3), (2, 1)]).unwrap();
    let p = balancing_profile(&t, &[0.0, 1e6], &WeightOptions::default()).unwrap();
    assert!(p.points[1].h_value >= p.points[0].h_value - 1e-9);
    assert!(balancing_profile(&t, &[1.0, 0.5], &WeightOptions::default()).is_err());
    assert!(balancing_profile(&t, &[], &WeightOptions::default()).is_err());
}

#[test]
fn setting_one_profile_is_monotone_and_selectable() {
    let inst = generate_instance(50, 50, 5, Setting::Uniform, 5.0, 3).unwrap();
    let grid = default_kappa_grid(50, 50, 8);
    let p = balancing_profile(&inst.mask, &grid, &WeightOptions::default()).unwrap();
    for w in p.points.windows(2) {
        assert!(w[1].h_value >= w[0].h_value - 1e-3 * w[0].h_value.max(1.0), "{:?}", p.points);
    }
    let pct = p.percentages();
    let sel = select_by_percentage(&p, &[0.75]).unwrap();
    let k = p.points.iter().position(|q| q.kappa_prime == sel[0].1).unwrap();
    // no other grid point is closer to the target
    assert!(pct.iter().all(|x| (x - 0.75).abs() >= (pct[k] - 0.75).abs()));
}

#[test]
fn relaxed_bound_dominates_balancing_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inst = generate_instance(12, 10, 2, Setting::HighObserved, 5.0, 17).unwrap();
    let w = solve_weights(&inst.mask, 0.01, &WeightOptions::default()).unwrap().weights;
    let beta_prime = 1.3;
    let bound = relaxed_bound(&w, &inst.mask, beta_prime).unwrap();
    for _ in 0..500 {
        let r = rng.random_range(1..4);
        let l = DenseMatrix::from_fn(12, r, |_, _| rng.random_range(-1.0..1.0));
        let rf = DenseMatrix::from_fn(10, r, |_, _| rng.random_range(-1.0..1.0));
        // scale so that ‖L‖_{2,∞}‖R‖_{2,∞} = β′ exactly, which bounds ‖LRᵀ‖_max by β′
        let s = (beta_prime / (common::row_norm_max(&l) * common::row_norm_max(&rf))).sqrt();
        let p = FactorPair::new(l * s, rf * s).unwrap();
        let delta = p.product();
        assert!(delta.amax() <= beta_prime * (1.0 + 1e-12));
        let err = balancing_error(&w, &inst.mask, &delta).unwrap();
        assert!(err <= bound * (1.0 + 1e-12), "{err} > {bound}");
    }
}

#[test]
fn inverse_probability_weights_meet_the_oracle_radius() {
    let mut hits = 0;
    for seed in 0..200u64 {
        let inst = generate_instance(40, 40, 3, Setting::Uniform, 5.0, 5000 + seed).unwrap();
        let w = inst.pi.map(|p| 1.0 / p);
        let frob = inst.mask.apply(&w).norm();
        if frob <= kappa_oracle(&inst.pi).unwrap() {
            hits += 1;
        }
    }
    assert!(hits >= 190, "{hits} of 200");
}

#[test]
fn balancing_shrinks_with_dimension() {
    let mut means = Vec::new();
    for n in [50usize, 100, 200] {
        let mut acc = 0.0;
        for seed in 0..10u64 {
            let inst = generate_instance(n, n, 5, Setting::Uniform, 5.0, 300 + seed).unwrap();
            let p = balancing_profile(&inst.mask, &default_kappa_grid(n, n, 8), &WeightOptions::default()).unwrap();
            acc += p.h_min / n as f64;
        }
        means.push(acc / 10.0);
    }
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
}
