use ibt_core::gradcheck::{check_op, finite_diff_check, GradCheckConfig, OPS};
use ibt_core::numerics::{self as nx, ParamKind, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_passes_on_several_seeds() {
    for seed in 1..6 {
        let cfg = GradCheckConfig { seed, ..Default::default() };
        for op in OPS {
            let r = check_op(op, &cfg).unwrap();
            assert!(r.passed, "seed {seed}\n{}", r.to_table());
        }
    }
}

#[test]
fn shared_subexpression_gradients_add_up() {
    // x feeds three paths: a product with itself, a sigmoid and a softmax.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = ParamStore::new();
    let x = s
        .insert("x", (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(), &[3, 4], ParamKind::Trainable)
        .unwrap();
    let r = finite_diff_check(
        "shared",
        &mut s,
        |p| {
            let x = p.tensor(x);
            let a = nx::mul(x, x)?;
            let b = nx::sigmoid(x);
            let c = nx::softmax(x, 1)?;
            let y = nx::add(&nx::add(&a, &b)?, &nx::mul(&c, x)?)?;
            Ok(nx::sum_all(&nx::mul(&y, &y)?))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.passed, "{}", r.to_table());
}

#[test]
fn gather_matches_a_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (rows, width) = (rng.random_range(1..20), rng.random_range(1..6));
        let x: Vec<f64> = (0..rows * width).map(|_| rng.random()).collect();
        let (a, b) = (rng.random_range(1..5), rng.random_range(1..5));
        let idx: Vec<usize> = (0..a * b).map(|_| rng.random_range(0..rows)).collect();
        let out = nx::gather_rows(&Tensor::new(x.clone(), &[rows, width]).unwrap(), &idx, &[a, b]).unwrap();
        assert_eq!(out.shape(), [a, b, width]);
        let mut expected = Vec::new();
        for &i in &idx {
            expected.extend_from_slice(&x[i * width..(i + 1) * width]);
        }
        assert_eq!(out.data(), expected.as_slice());
    }
    let bad = nx::gather_rows(&Tensor::zeros(&[2, 2]), &[2], &[1]);
    assert!(matches!(bad, Err(ibt_core::IbtError::Index(_))));
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::new((0..64 * 48).map(|_| rng.random()).collect(), &[64, 48]).unwrap();
    let b = Tensor::new((0..48 * 32).map(|_| rng.random()).collect(), &[48, 32]).unwrap();
    let run = || nx::softmax(&nx::matmul(&a, &b).unwrap(), 1).unwrap().to_vec();
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        vals in prop::collection::vec(-50.0f64..50.0, 1..40),
        inner in 1usize..4,
    ) {
        let n = vals.len() - vals.len() % inner;
        prop_assume!(n > 0);
        let t = Tensor::new(vals[..n].to_vec(), &[n / inner, inner]).unwrap();
        let s = nx::softmax(&t, 0).unwrap();
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        for c in 0..inner {
            let sum: f64 = (0..n / inner).map(|r| s.data()[r * inner + c]).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }
}
