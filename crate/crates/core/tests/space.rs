use std::path::PathBuf;

use aod_core::space::*;
use num_bigint::BigUint;
use proptest::prelude::*;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn workspace_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn tokens(n: usize) -> impl Strategy<Value = Vec<usize>> {
    let sizes = slot_sizes(n).unwrap();
    sizes.into_iter().map(|s| 0..s).collect::<Vec<_>>()
}

fn any_tokens() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=6).prop_flat_map(tokens)
}

// Set BLESS=1 to rewrite the golden file after an intentional change.
#[test]
fn slot_order_matches_golden_file() {
    let rendered = render_slots(3).unwrap();
    let path = golden("slot_order.txt");
    if std::env::var_os("BLESS").is_some() {
        std::fs::write(&path, &rendered).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap();
    assert_eq!(rendered, expected);
}

#[test]
fn vocabularies_are_stable_and_sized() {
    for n in 1..=6 {
        let v = vocabularies(n).unwrap();
        assert_eq!(v.len(), 6 * n + 2);
        assert_eq!(v, vocabularies(n).unwrap());
        assert_eq!(v[0].kind, SlotKind::DefinitionHypothesis);
        assert_eq!(v[1].kind, SlotKind::Distance);
        for (i, s) in v.iter().enumerate() {
            assert_eq!(s.slot_id, i);
            assert_eq!(s.choices.len(), s.kind.size());
        }
    }
    assert_eq!(slot_sizes(1).unwrap(), vec![4, 4, 7, 4, 2, 4, 3, 8]);
    assert!(vocabularies(0).is_err());
}

#[test]
fn cardinality_matches_slot_product() {
    for n in 1..=6 {
        let product = slot_sizes(n).unwrap().iter().fold(BigUint::from(1u32), |acc, &s| acc * BigUint::from(s));
        assert_eq!(cardinality(n), product);
    }
    // 5376^2 * 16 computed by hand in u128.
    assert_eq!(cardinality(2), BigUint::from(16u128 * 5376 * 5376));
    let six: f64 = cardinality(6).to_string().parse().unwrap();
    assert!((six / 1e23 - 3.9).abs() < 0.05, "{six:e}");
}

#[test]
fn mnist_architecture_decodes() {
    let text = std::fs::read_to_string(workspace_file("configs/mnist_spec.json")).unwrap();
    let spec: ModelSpec = serde_json::from_str(&text).unwrap();
    let actions = encode(&spec).unwrap();
    assert_eq!(actions.0, vec![3, 0, 3, 2, 1, 0, 2, 2, 1, 1, 1, 0, 2, 7, 1, 3, 1, 2, 2, 6]);
    let back = decode(&actions).unwrap();
    assert_eq!(back, spec);
    assert_eq!(back.hypothesis, Hypothesis::Reconstruction);
    assert_eq!((back.layers[0].out_channels, back.layers[0].conv_kernel), (32, 5));
}

#[test]
fn encode_rejects_values_outside_the_vocabulary() {
    let mut spec = decode(&ActionSequence(vec![0; 8])).unwrap();
    spec.layers[0].out_channels = 12;
    assert!(encode(&spec).is_err());
    spec.layers[0].out_channels = 3;
    spec.layers[0].conv_kernel = 2;
    assert!(encode(&spec).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decode_then_encode_is_identity(t in any_tokens()) {
        let spec = decode(&ActionSequence(t.clone())).unwrap();
        prop_assert_eq!(encode(&spec).unwrap().0, t);
    }

    #[test]
    fn encode_then_decode_is_identity(t in any_tokens()) {
        let spec = decode(&ActionSequence(t)).unwrap();
        prop_assert_eq!(decode(&encode(&spec).unwrap()).unwrap(), spec);
    }

    #[test]
    fn out_of_range_tokens_are_rejected(t in tokens(2), slot in 0usize..14) {
        let mut t = t;
        t[slot] = slot_sizes(2).unwrap()[slot];
        prop_assert!(decode(&ActionSequence(t)).is_err());
    }
}
