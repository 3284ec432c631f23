use aod_substrate::gradcheck::{grad_check_graph, operator_suite};
use aod_substrate::ops::{Activation, Act, Conv2d, Sum};
use aod_substrate::{Feed, Graph, Mode, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_operator_passes_finite_differences_at_five_points() {
    let reports = operator_suite(5, 1e-5, 2024).unwrap();
    let failures: Vec<_> = reports.iter().filter(|r| r.max_error >= 1e-4).collect();
    assert!(failures.is_empty(), "{failures:?}");
    assert!(reports.len() > 30);
}

#[test]
fn conv_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.input("x", &[1, 1, 8, 8]);
    let w = g.param("w", &[2, 1, 3, 3]);
    let b = g.param("b", &[2]);
    let y = g.apply(Conv2d { kernel: 3 }, &[x, w, b]).unwrap();
    let y = g.apply(Act(Activation::Tanh), &[y]).unwrap();
    let loss = g.apply(Sum, &[y]).unwrap();
    let mut params = ParamSet::new();
    let rand = |rng: &mut ChaCha8Rng, s: &[usize]| {
        let n = s.iter().product();
        Tensor::new(s, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    params.insert("w".into(), rand(&mut rng, &[2, 1, 3, 3]).trainable());
    params.insert("b".into(), rand(&mut rng, &[2]).trainable());
    let feed = Feed::from([("x".to_string(), rand(&mut rng, &[1, 1, 8, 8]))]);
    let err = grad_check_graph(&g, &params, &feed, loss, Mode::Eval, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}
