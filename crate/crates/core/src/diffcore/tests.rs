use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let g = Graph::new();
    let a = g.constant(&Tensor::identity(2)).unwrap();
    let b = g.constant(&t(&[2, 1], &[3.0, 4.0])).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), t(&[2, 1], &[3.0, 4.0]));
}

#[test]
fn sigmoid_and_leaky() {
    let g = Graph::new();
    let x = g.constant(&Tensor::scalar(0.0)).unwrap();
    assert_eq!(g.scalar(g.sigmoid(x).unwrap()), 0.5);
    let y = g.constant(&Tensor::scalar(-2.0)).unwrap();
    let l = g.leaky_relu(y, 0.2).unwrap();
    assert!((g.scalar(l) + 0.4).abs() < 1e-15);
}

#[test]
fn shape_mismatch() {
    let g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    let c = g.constant(&Tensor::zeros(&[3, 2])).unwrap();
    assert!(matches!(g.add(a, c), Err(Error::Shape(_))));
}

#[test]
fn log_domain_is_numeric_error() {
    let g = Graph::new();
    let a = g.constant(&t(&[2], &[1.0, -1.0])).unwrap();
    assert!(matches!(g.log(a), Err(Error::Numeric(_))));
    let b = g.constant(&Tensor::scalar(1000.0)).unwrap();
    assert!(matches!(g.exp(b), Err(Error::Numeric(_))));
}

#[test]
fn sum_grad_is_ones() {
    let g = Graph::new();
    let x = g.variable(&t(&[3], &[0.3, -1.0, 2.0])).unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn mean_square_grad() {
    let g = Graph::new();
    let x = g.variable(&t(&[2], &[2.0, -2.0])).unwrap();
    let l = g.mean(g.square(x).unwrap()).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[2.0, -2.0]);
}

#[test]
fn reused_input_accumulates() {
    let g = Graph::new();
    let x = g.variable(&Tensor::scalar(1.5)).unwrap();
    let y = g.add(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[2.0]);
}

#[test]
fn backward_contracts() {
    let g = Graph::new();
    let x = g.variable(&t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn grl_forward_identity() {
    let g = Graph::new();
    let x = g.variable(&t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let y = g.gradient_reversal(x, 1.0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
}

fn grl_grad(upstream: &[f64], lambda: f64) -> Vec<f64> {
    let g = Graph::new();
    let x = g.variable(&t(&[upstream.len()], &[0.7, -0.2][..upstream.len()])).unwrap();
    let y = g.gradient_reversal(x, lambda).unwrap();
    let w = g.constant(&t(&[upstream.len()], upstream)).unwrap();
    let l = g.sum(g.mul(y, w).unwrap()).unwrap();
    g.backward(l).unwrap().wrt(x).unwrap().to_vec()
}

#[test]
fn grl_backward() {
    assert_eq!(grl_grad(&[1.0, 1.0], 1.0), vec![-1.0, -1.0]);
    assert_eq!(grl_grad(&[2.0, 0.0], 0.5), vec![-1.0, 0.0]);
}

#[test]
fn grl_negative_lambda() {
    let g = Graph::new();
    let x = g.variable(&Tensor::scalar(1.0)).unwrap();
    assert!(matches!(
        g.gradient_reversal(x, -0.1),
        Err(Error::Contract(_))
    ));
}

#[test]
fn frozen_param_gets_no_grad() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::scalar(2.0));
    let b = store.add("b", Tensor::scalar(3.0));
    store.set_trainable(&[b], false);
    let g = Graph::new();
    let (va, vb) = (g.param(&store, a).unwrap(), g.param(&store, b).unwrap());
    let l = g.mul(va, vb).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.param(a).unwrap(), vec![3.0]);
    assert!(grads.param(b).is_none());
    store.accumulate(&grads).unwrap();
    assert_eq!(store.get(a).grad().unwrap(), &[3.0]);
    assert!(store.get(b).grad().is_none());
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn every_op_passes_grad_check() {
    let mut r = rng(7);
    let m = Tensor::randn(&[3, 4], 1.0, &mut r);
    let n = Tensor::randn(&[4, 2], 1.0, &mut r);
    let same = Tensor::randn(&[3, 4], 1.0, &mut r);
    let row = Tensor::randn(&[1, 4], 1.0, &mut r);
    let pos = Tensor::uniform(&[3, 4], 1.0, &mut r);
    let pos = Tensor::new(vec![3, 4], pos.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let weights = Tensor::randn(&[64], 1.0, &mut r);
    let cases: Vec<(OpKind, Vec<Tensor>)> = vec![
        (OpKind::MatMul, vec![m.clone(), n.clone()]),
        (OpKind::Add, vec![m.clone(), row.clone()]),
        (OpKind::Multiply, vec![m.clone(), same.clone()]),
        (OpKind::Multiply, vec![row.clone(), m.clone()]),
        (OpKind::Subtract, vec![m.clone(), row.clone()]),
        (OpKind::Divide, vec![m.clone(), pos.clone()]),
        (OpKind::Negate, vec![m.clone()]),
        (OpKind::Sum, vec![m.clone()]),
        (OpKind::Mean, vec![m.clone()]),
        (OpKind::Sigmoid, vec![m.clone()]),
        (OpKind::LeakyRelu(0.2), vec![m.clone()]),
        (OpKind::Log, vec![pos.clone()]),
        (OpKind::Exp, vec![m.clone()]),
        (OpKind::Square, vec![m.clone()]),
        (OpKind::Concat(0), vec![m.clone(), row.clone()]),
        (OpKind::Concat(1), vec![m.clone(), same.clone()]),
        (OpKind::Slice(1, 1, 3), vec![m.clone()]),
        (OpKind::Slice(0, 1, 3), vec![m.clone()]),
        (OpKind::Broadcast, vec![row.clone(), m.clone()]),
        (OpKind::Transpose, vec![m.clone()]),
        (OpKind::SoftmaxRows, vec![m.clone()]),
        (OpKind::LogSumExpRows, vec![m.clone()]),
        (OpKind::Clamp(-0.5, 0.5), vec![m.clone()]),
    ];
    for (kind, inputs) in cases {
        let weights = weights.clone();
        let report = grad_check(
            &format!("{kind:?}"),
            &inputs,
            |g, vars| {
                let y = g.forward_op(kind, vars)?;
                let shape = g.shape(y);
                let n: usize = shape.iter().product();
                let w = g.constant(&Tensor::new(shape, weights.data()[..n].to_vec())?)?;
                g.sum(g.mul(y, w)?)
            },
            1e-4,
        );
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn upsample_grad_check() {
    let mut r = rng(3);
    let x = Tensor::randn(&[3, 3], 1.0, &mut r);
    let w = Tensor::randn(&[8, 8], 1.0, &mut r);
    let report = grad_check(
        "upsample",
        &[x],
        |g, v| {
            let u = g.upsample_bilinear(v[0], 8, 8)?;
            let w = g.constant(&w)?;
            g.sum(g.mul(u, w)?)
        },
        1e-4,
    );
    assert!(report.passed, "{report:?}");
}

#[test]
fn grl_scales_unwrapped_gradient() {
    let mut r = rng(11);
    let x = Tensor::randn(&[2, 3], 1.0, &mut r);
    let lambda = 0.37;
    let run = |wrap: bool| {
        let g = Graph::new();
        let v = g.variable(&x).unwrap();
        let h = if wrap { g.gradient_reversal(v, lambda).unwrap() } else { v };
        let l = g.sum(g.sigmoid(g.square(h).unwrap()).unwrap()).unwrap();
        g.backward(l).unwrap().wrt(v).unwrap().to_vec()
    };
    let (plain, wrapped) = (run(false), run(true));
    for (p, w) in plain.iter().zip(&wrapped) {
        assert_eq!(*w, -lambda * p);
    }
}

#[test]
fn linear_layer_param_check() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::xavier(4, 3, &mut r));
    let b = store.add("b", Tensor::randn(&[1, 3], 0.1, &mut r));
    let x = Tensor::randn(&[5, 4], 1.0, &mut r);
    let report = grad_check_params(
        "linear",
        &store,
        &[w, b],
        64,
        |g, s| {
            let xv = g.constant(&x)?;
            let h = g.add(g.matmul(xv, g.param(s, w)?)?, g.param(s, b)?)?;
            g.mean(g.square(g.leaky_relu(h, 0.2)?)?)
        },
        1e-4,
    );
    assert!(report.passed, "{report:?}");
    assert_eq!(report.entries[0].checked, 12);
}

#[test]
fn determinism() {
    let run = || {
        let mut r = rng(99);
        let a = Tensor::randn(&[6, 5], 1.0, &mut r);
        let b = Tensor::randn(&[5, 4], 1.0, &mut r);
        let g = Graph::new();
        let (va, vb) = (g.variable(&a).unwrap(), g.variable(&b).unwrap());
        let l = g
            .mean(g.exp(g.softmax_rows(g.matmul(va, vb).unwrap()).unwrap()).unwrap())
            .unwrap();
        let grads = g.backward(l).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        (
            g.scalar(l).to_bits(),
            bits(grads.wrt(va).unwrap()),
            bits(grads.wrt(vb).unwrap()),
        )
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grl_forward_bitwise(xs in prop::collection::vec(-1e6f64..1e6, 1..20), lambda in 0.0f64..5.0) {
        let g = Graph::new();
        let x = g.variable(&Tensor::new(vec![xs.len()], xs.clone()).unwrap()).unwrap();
        let y = g.gradient_reversal(x, lambda).unwrap();
        let out = g.value(y);
        prop_assert!(out.data().iter().zip(&xs).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn composed_graph_matches_fd(seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        let c = Tensor::randn(&[1, 2], 1.0, &mut r);
        let report = grad_check(
            "composed",
            &[a, b, c],
            |g, v| {
                let h = g.add(g.matmul(v[0], v[1])?, v[2])?;
                let s = g.sigmoid(h)?;
                let l = g.logsumexp_rows(g.mul(s, h)?)?;
                g.mean(g.square(l)?)
            },
            1e-4,
        );
        prop_assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn add_self_doubles(xs in prop::collection::vec(-10f64..10.0, 1..10)) {
        let g = Graph::new();
        let x = g.variable(&Tensor::new(vec![xs.len()], xs).unwrap()).unwrap();
        let l = g.sum(g.add(x, x).unwrap()).unwrap();
        let grads = g.backward(l).unwrap();
        prop_assert!(grads.wrt(x).unwrap().iter().all(|&v| v == 2.0));
    }
}
