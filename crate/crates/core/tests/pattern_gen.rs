use lada::image::BinaryImage;
use lada::pattern::*;
use proptest::prelude::*;

#[test]
fn training_rules_hold_for_1000_seeds() {
    let rules = DesignRules::training();
    for seed in 0..1000 {
        let m = generate_pattern(&rules, seed).unwrap();
        let v = verify_rules(&m, &rules);
        assert!(v.is_empty(), "seed {seed}: {v:?}");
        let f = m.foreground_fraction();
        assert!(f > 0.0 && f <= 0.7, "seed {seed}: fraction {f}");
    }
}

#[test]
fn shifted_rules_hold_for_1000_seeds() {
    let rules = DesignRules::shifted_test();
    for seed in 0..1000 {
        let m = generate_pattern(&rules, seed).unwrap();
        assert!(verify_rules(&m, &rules).is_empty(), "seed {seed}");
        let f = m.foreground_fraction();
        assert!(f > 0.0 && f <= 0.7);
    }
}

#[test]
fn bar_and_gap_examples() {
    let rules = DesignRules::training();
    let bar = BinaryImage::from_fn(64, 64, |y, x| (5..40).contains(&y) && (30..33).contains(&x));
    let v = verify_rules(&bar, &rules);
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].kind, ViolationKind::Width);

    let two = BinaryImage::from_fn(64, 64, |y, x| (20..28).contains(&y) && ((20..28).contains(&x) || (30..38).contains(&x)));
    let v = verify_rules(&two, &rules);
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].kind, ViolationKind::Space);
    assert_eq!(v[0].lines, [20, 27]);
}

#[test]
fn diagonal_neighbours_are_not_a_column_gap() {
    // squares touching only at a corner gap of 2 in both axes: no row or column
    // crosses both, so no line-based spacing violation exists
    let rules = DesignRules::training();
    let m = BinaryImage::from_fn(64, 64, |y, x| {
        (10..18).contains(&y) && (10..18).contains(&x) || (20..28).contains(&y) && (20..28).contains(&x)
    });
    assert!(verify_rules(&m, &rules).is_empty());
}

#[test]
fn rules_json_round_trip() {
    let r = DesignRules::shifted_test();
    let s = serde_json::to_string(&r).unwrap();
    let back: DesignRules = serde_json::from_str(&s).unwrap();
    assert_eq!(back, r);
    assert!(serde_json::from_str::<DesignRules>(r#"{"min_width":6}"#).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_generated_patterns_are_compliant(
        seed in any::<u64>(),
        min_width in 2usize..8,
        min_space in 0usize..6,
        lo_extra in 0usize..4,
        span in 0usize..16,
        n_lo in 1usize..4,
        n_span in 0usize..5,
    ) {
        let lo = min_width + lo_extra;
        let rules = DesignRules {
            min_width,
            min_space,
            rect_count: [n_lo, n_lo + n_span],
            side_range: [lo, lo + span],
            canvas: [64, 64],
        };
        let m = generate_pattern(&rules, seed).unwrap();
        prop_assert!(m.count_ones() >= lo * lo);
        prop_assert!(verify_rules(&m, &rules).is_empty());
        prop_assert_eq!(generate_pattern(&rules, seed).unwrap(), m);
    }
}
