use lada::image::{BinaryImage, MaskImage};
use lada::litho::*;
use proptest::prelude::*;
use rand::Rng;

fn defaults() -> KernelSet {
    build_kernels(&KernelConfig::default()).unwrap()
}

fn random_mask(seed: u64, density: f64) -> MaskImage {
    let mut r = lada::rng::rng(seed);
    BinaryImage::from_fn(64, 64, |_, _| r.random_bool(density))
}

#[test]
fn calibration_reproduces_frozen_threshold() {
    let t = calibrate_threshold(&[1.5, 3.0, 6.0], &[0.6, 0.3, 0.1], &default_probes()).unwrap();
    assert_eq!(t, DEFAULT_THETA);
}

#[test]
fn single_pixel_center_intensity() {
    let ks = defaults();
    let mut m = BinaryImage::zeros(64, 64);
    m.set(32, 32, true);
    let a = simulate_aerial(&m, &ks);
    // a lone pixel convolved with h gives h(0,0) at its own location
    let expect: f64 = ks
        .kernels
        .iter()
        .zip(&ks.weights)
        .map(|(k, w)| {
            let r = k.radius as i64;
            let s = (2.0 * k.sigma * k.sigma).recip();
            let z: f64 = (-r..=r).map(|i| (-(i * i) as f64 * s).exp()).sum();
            let h00 = 1.0 / (z * z);
            w * h00 * h00
        })
        .sum();
    assert!((a.get(32, 32) - expect).abs() < 1e-12, "{} vs {expect}", a.get(32, 32));
}

#[test]
fn square_prints_inside_box_with_fourfold_symmetry() {
    let ks = defaults();
    let m = BinaryImage::centered_square(64, 20);
    let z = simulate(&m, &ks);
    assert!(z.count_ones() > 0);
    assert!(z.count_ones() <= 400);
    // the square spans [22, 42); reflect about its centre line 31.5
    for y in 0..64 {
        for x in 0..64 {
            let (fy, fx) = ((63 - y) % 64, (63 - x) % 64);
            assert_eq!(z.get(y, x), z.get(fy, x));
            assert_eq!(z.get(y, x), z.get(y, fx));
            assert_eq!(z.get(y, x), z.get(x, y));
        }
    }
}

#[test]
fn frozen_probe_areas() {
    let ks = defaults();
    let areas: Vec<usize> = default_probes().iter().map(|p| simulate(p, &ks).count_ones()).collect();
    assert_eq!(areas, vec![60, 140, 252, 572]);
}

#[test]
fn aerial_bounded_for_random_masks() {
    let ks = defaults();
    for seed in 0..20 {
        let a = simulate_aerial(&random_mask(seed, 0.4), &ks);
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn monotone_in_mask_for_nested_pairs() {
    let ks = defaults();
    let mut r = lada::rng::rng(7);
    for _ in 0..100 {
        let big = BinaryImage::from_fn(64, 64, |_, _| r.random_bool(0.35));
        let small = BinaryImage::from_fn(64, 64, |y, x| big.get(y, x) && r.random_bool(0.6));
        let (a1, a2) = (simulate_aerial(&small, &ks), simulate_aerial(&big, &ks));
        assert!(a1.data.iter().zip(&a2.data).all(|(p, q)| p <= q));
        assert!(simulate(&small, &ks).is_subset_of(&simulate(&big, &ks)));
    }
}

#[test]
fn shift_equivariance_is_exact() {
    let ks = defaults();
    let mut r = lada::rng::rng(11);
    for _ in 0..50 {
        let m = BinaryImage::from_fn(64, 64, |_, _| r.random_bool(0.3));
        let (dy, dx) = (r.random_range(-63i64..64) as isize, r.random_range(-63i64..64) as isize);
        assert_eq!(simulate(&m.shifted(dy, dx), &ks), simulate(&m, &ks).shifted(dy, dx));
    }
}

#[test]
fn a_single_flip_can_change_the_print() {
    let ks = defaults();
    let mut r = lada::rng::rng(3);
    let found = (0..200).any(|_| {
        let mut m = BinaryImage::from_fn(64, 64, |_, _| r.random_bool(0.3));
        let before = simulate(&m, &ks);
        m.flip(r.random_range(0..64), r.random_range(0..64));
        simulate(&m, &ks) != before
    });
    assert!(found);
}

#[test]
fn printed_area_non_increasing_in_theta() {
    let ks = defaults();
    for p in default_probes().iter().chain([random_mask(5, 0.3)].iter()) {
        let a = simulate_aerial(p, &ks);
        let areas: Vec<usize> = (1..=99).map(|i| apply_resist(&a, i as f64 / 100.0).count_ones()).collect();
        assert!(areas.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn legalize_restores_perturbed_encodings() {
    let mut r = lada::rng::rng(19);
    for seed in 0..10 {
        let m = random_mask(seed, 0.5);
        let enc = m.encode();
        assert_eq!(legalize(enc.data(), 64, 64).unwrap(), m);
        let noisy: Vec<f32> = enc.data().iter().map(|v| v + r.random_range(-0.99f32..=0.99)).collect();
        assert_eq!(legalize(&noisy, 64, 64).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_shift_equivariance(seed in any::<u64>(), dy in -70isize..70, dx in -70isize..70) {
        let ks = defaults();
        let m = random_mask(seed, 0.3);
        prop_assert_eq!(simulate(&m.shifted(dy, dx), &ks), simulate(&m, &ks).shifted(dy, dx));
    }

    #[test]
    fn prop_adding_pixels_never_removes_print(seed in any::<u64>(), y in 0usize..64, x in 0usize..64) {
        let ks = defaults();
        let m = random_mask(seed, 0.25);
        let mut bigger = m.clone();
        bigger.set(y, x, true);
        prop_assert!(simulate(&m, &ks).is_subset_of(&simulate(&bigger, &ks)));
    }

    #[test]
    fn prop_legalize_inverts_encoding(bits in proptest::collection::vec(any::<bool>(), 64)) {
        let m = BinaryImage::from_fn(8, 8, |y, x| bits[y * 8 + x]);
        prop_assert_eq!(legalize(m.encode().data(), 8, 8).unwrap(), m);
    }
}
