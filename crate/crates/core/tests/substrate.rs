mod common;

use common::invariants;
use longstyle::substrate::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn op_and_layer_gradients() {
    invariants::op_gradients(20).unwrap();
}

#[test]
fn masked_softmax() {
    invariants::softmax_rows().unwrap();
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(rows in 1usize..5, cols in 1usize..8, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let t = Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-50.0..50.0)).collect());
        let mut g = Graph::new();
        let x = g.constant(t);
        let p = g.softmax(x);
        for i in 0..rows {
            let row = g.value(p).row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_centres_rows(vals in proptest::collection::vec(-10.0f64..10.0, 6)) {
        prop_assume!(vals.iter().any(|&v| (v - vals[0]).abs() > 1e-3));
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(1, 6, vals));
        let gamma = g.constant(Tensor::from_vec(1, 6, vec![1.0; 6]));
        let beta = g.constant(Tensor::zeros(1, 6));
        let y = g.layer_norm(x, gamma, beta);
        let row = g.value(y).row(0);
        prop_assert!(row.iter().sum::<f64>().abs() < 1e-9);
    }
}
