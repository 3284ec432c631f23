#[path = "common/oracles.rs"]
mod oracles;

use aod_core::metrics::*;
use aod_core::AodError;
use oracles::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        // Two decimals leave plenty of ties.
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0..1.0f64) * 100.0).round() / 100.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

#[test]
fn auroc_and_aupr_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let (s, l) = instance(&mut rng, 200);
        assert!((auroc(&s, &l).unwrap() - pairwise_auroc(&s, &l)).abs() < 1e-9);
        assert!((aupr(&s, &l, PositiveClass::Out).unwrap() - sweep_aupr(&s, &l, true)).abs() < 1e-9);
        assert!((aupr(&s, &l, PositiveClass::In).unwrap() - sweep_aupr(&s, &l, false)).abs() < 1e-9);
    }
}

#[test]
fn documented_examples() {
    assert_eq!(auroc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, false, false]).unwrap(), 0.5);
    assert_eq!(aupr(&[0.9, 0.8, 0.1], &[true, true, false], PositiveClass::Out).unwrap(), 1.0);
    let labels = [true, false, false, false, true];
    assert!((aupr(&[0.2; 5], &labels, PositiveClass::Out).unwrap() - 0.4).abs() < 1e-15);
    assert!((aupr(&[0.2; 5], &labels, PositiveClass::In).unwrap() - 0.6).abs() < 1e-15);
}

#[test]
fn single_class_and_mismatched_inputs_are_rejected() {
    assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(AodError::Contract(_))));
    assert!(matches!(aupr(&[0.1, 0.2], &[false, false], PositiveClass::In), Err(AodError::Contract(_))));
    assert!(matches!(auroc(&[0.1], &[true, false]), Err(AodError::Contract(_))));
    assert!(matches!(auroc(&[f64::NAN, 0.2], &[true, false]), Err(AodError::Numeric(_))));
}

#[test]
fn overlap_fixtures_are_exact() {
    for c in overlap_cases() {
        let got = region_overlap(&c.predictions, &c.truths, c.height, c.width).unwrap();
        assert_eq!(got, c.expected, "{}", c.name);
    }
}

#[test]
fn rpro_fixtures_are_exact() {
    for c in rpro_cases() {
        let got = rpro(&c.maps, &c.masks, 4, 4, c.thresholds).unwrap();
        assert_eq!(got, c.expected, "{}", c.name);
    }
    let empty = vec![vec![false; 16]];
    assert!(matches!(rpro(&[vec![0.0; 16]], &empty, 4, 4, 50), Err(AodError::Contract(_))));
}

#[test]
fn csv_rows_carry_class_counts() {
    assert_eq!(csv_row("auroc", 0.75, &[true, false, false]), "auroc,0.75,1,2");
}

fn distinct_instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (4usize..60).prop_flat_map(|n| {
        (
            proptest::collection::hash_set(-100_000i64..100_000, n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
            .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 / 1000.0).collect(), l))
    })
}

proptest! {
    #[test]
    fn auroc_is_invariant_to_increasing_maps((s, l) in distinct_instance()) {
        let warped: Vec<f64> = s.iter().map(|v| (v / 10.0).exp() + v.powi(3)).collect();
        prop_assert!((auroc(&s, &l).unwrap() - auroc(&warped, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn negating_scores_complements_auroc((s, l) in distinct_instance()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aupr_in_is_aupr_out_of_the_flipped_problem((s, l) in distinct_instance()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let flipped: Vec<bool> = l.iter().map(|v| !v).collect();
        let a = aupr(&s, &l, PositiveClass::In).unwrap();
        let b = aupr(&neg, &flipped, PositiveClass::Out).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn overlap_grows_with_the_prediction(truth in proptest::collection::vec(any::<bool>(), 25), order in Just((0..25).collect::<Vec<usize>>()).prop_shuffle()) {
        prop_assume!(truth.iter().any(|&t| t));
        let mut pred = vec![false; 25];
        let mut last = region_overlap(&[pred.clone()], &[truth.clone()], 5, 5).unwrap();
        for p in order {
            pred[p] = true;
            let now = region_overlap(&[pred.clone()], &[truth.clone()], 5, 5).unwrap();
            prop_assert!(now >= last);
            last = now;
        }
        prop_assert_eq!(last, 1.0);
    }
}
