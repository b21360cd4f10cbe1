use balanced_mc::experiments::{generate_instance, kappa_oracle, Setting};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn same_seed_same_instance(seed in any::<u64>(), setting in 1u8..=3) {
        let s = Setting::from_index(setting).unwrap();
        let a = generate_instance(15, 12, 3, s, 4.0, seed).unwrap();
        let b = generate_instance(15, 12, 3, s, 4.0, seed).unwrap();
        prop_assert_eq!(&a.a_star, &b.a_star);
        prop_assert_eq!(&a.y, &b.y);
        prop_assert_eq!(&a.mask, &b.mask);
        prop_assert_eq!(a.sigma_eps.to_bits(), b.sigma_eps.to_bits());
    }

    #[test]
    fn settings_two_and_three_swap_probabilities(seed in any::<u64>()) {
        let two = generate_instance(20, 16, 4, Setting::HighObserved, 5.0, seed).unwrap();
        let three = generate_instance(20, 16, 4, Setting::LowObserved, 5.0, seed).unwrap();
        prop_assert_eq!(&two.a_star, &three.a_star);
        let swapped = two.pi.map(|p| if p == 1.0 / 16.0 { 7.0 / 16.0 } else if p == 7.0 / 16.0 { 1.0 / 16.0 } else { p });
        prop_assert_eq!(&swapped, &three.pi);
    }

    #[test]
    fn quartile_masks_have_quarter_mass(seed in any::<u64>(), n1 in 5usize..40, n2 in 5usize..40) {
        let inst = generate_instance(n1, n2, 3, Setting::HighObserved, 5.0, seed).unwrap();
        let nn = (n1 * n2) as f64;
        let low = inst.pi.iter().filter(|&&p| p == 1.0 / 16.0).count() as f64 / nn;
        let high = inst.pi.iter().filter(|&&p| p == 7.0 / 16.0).count() as f64 / nn;
        // ties and the interpolated quantile move the boundary by at most one cell
        prop_assert!((low - 0.25).abs() <= 1.0 / nn + 1e-12, "low fraction {}", low);
        prop_assert!((high - 0.25).abs() <= 1.0 / nn + 1e-12, "high fraction {}", high);
    }
}

#[test]
fn setting_three_hides_the_top_quartile() {
    let inst = generate_instance(40, 30, 5, Setting::LowObserved, 5.0, 8).unwrap();
    let mut v: Vec<f64> = inst.a_star.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * 0.75;
    let q75 = v[h.floor() as usize] + h.fract() * (v[h.floor() as usize + 1] - v[h.floor() as usize]);
    for (a, p) in inst.a_star.iter().zip(inst.pi.iter()) {
        assert_eq!(*a > q75, *p == 1.0 / 16.0);
    }
}

#[test]
fn snr_calibration_over_fresh_instances() {
    let (mut signal, mut noise) = (0.0, 0.0);
    for seed in 0..200u64 {
        let inst = generate_instance(40, 40, 5, Setting::Uniform, 5.0, 9000 + seed).unwrap();
        signal += inst.a_star.norm_squared();
        noise += (&inst.y - &inst.a_star).norm_squared();
    }
    let snr = (signal / noise).sqrt();
    assert!((snr / 5.0 - 1.0).abs() < 0.02, "empirical SNR {snr}");
}

#[test]
fn kappa_oracle_matches_scalar_sum_at_full_size() {
    let inst = generate_instance(200, 200, 5, Setting::HighObserved, 5.0, 2).unwrap();
    let mut acc = 0.0;
    for i in 0..200 {
        for j in 0..200 {
            acc += 1.0 / inst.pi[(i, j)];
        }
    }
    let k = kappa_oracle(&inst.pi).unwrap();
    assert!((k - (2.0 * acc).sqrt()).abs() <= 1e-9 * k);
}
