use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::decoupler::Decoupler;
use crate::diffcore::{grad_check, grad_check_params, Optimizer, OptimizerConfig, Tensor};

fn setup(seed: u64, h: usize) -> (ParamStore, Discriminator, Discriminator, ChaCha8Rng) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let dt = Discriminator::new(&mut s, Role::Text, h, 0.2, &mut r);
    let dv = Discriminator::new(&mut s, Role::Vision, h, 0.2, &mut r);
    (s, dt, dv, r)
}

fn j_value(s: &ParamStore, dt: &Discriminator, dv: &Discriminator, ht: &Tensor, hv: &Tensor) -> f64 {
    let g = Graph::new();
    let (a, b) = (g.constant(ht).unwrap(), g.constant(hv).unwrap());
    let (_, stats) = adv_objective(&g, s, a, b, dt, dv, 1.0, AdvWiring::Paper).unwrap();
    stats.objective
}

#[test]
fn half_outputs_give_two_log_half() {
    let (mut s, dt, dv, mut r) = setup(0, 4);
    for d in [&dt, &dv] {
        s.get_mut(d.mlp.l2.weight).data_mut().fill(0.0);
    }
    let ht = Tensor::randn(&[6, 4], 1.0, &mut r);
    let hv = Tensor::randn(&[6, 4], 1.0, &mut r);
    let j = j_value(&s, &dt, &dv, &ht, &hv);
    assert!((j - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    assert!((j + 1.3863).abs() < 1e-4);
}

#[test]
fn saturated_outputs_give_zero() {
    let (mut s, dt, dv, mut r) = setup(1, 4);
    for (d, b) in [(&dt, -60.0), (&dv, 60.0)] {
        s.get_mut(d.mlp.l2.weight).data_mut().fill(0.0);
        s.get_mut(d.mlp.l2.bias.unwrap()).data_mut().fill(b);
    }
    let ht = Tensor::randn(&[3, 4], 1.0, &mut r);
    let j = j_value(&s, &dt, &dv, &ht, &ht);
    assert!(j.is_finite() && j < 0.0 && j > -3e-6, "{j}");
}

#[test]
fn empty_and_mismatched_batches() {
    let (s, dt, dv, _) = setup(2, 4);
    let g = Graph::new();
    let e = g.constant(&Tensor::zeros(&[0, 4])).unwrap();
    assert!(matches!(
        adv_objective(&g, &s, e, e, &dt, &dv, 0.1, AdvWiring::Paper),
        Err(Error::Contract(_))
    ));
    let a = g.constant(&Tensor::zeros(&[2, 4])).unwrap();
    let b = g.constant(&Tensor::zeros(&[3, 4])).unwrap();
    assert!(matches!(
        adv_objective(&g, &s, a, b, &dt, &dv, 0.1, AdvWiring::Paper),
        Err(Error::Shape(_))
    ));
}

fn heads_and_discs(seed: u64) -> (ParamStore, Decoupler, Discriminator, Discriminator, Tensor) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let dec = Decoupler::new(&mut s, 6, 4, &mut r);
    let dt = Discriminator::new(&mut s, Role::Text, 4, 0.2, &mut r);
    let dv = Discriminator::new(&mut s, Role::Vision, 4, 0.2, &mut r);
    let x = Tensor::randn(&[16, 6], 1.0, &mut r);
    (s, dec, dt, dv, x)
}

fn objective_grads(s: &ParamStore, dec: &Decoupler, dt: &Discriminator, dv: &Discriminator, x: &Tensor, lambda: f64, grl: bool) -> (f64, crate::diffcore::Grads) {
    let g = Graph::new();
    let xv = g.constant(x).unwrap();
    let (ht, hv) = dec.decouple(&g, s, xv).unwrap();
    let loss = if grl {
        adv_objective(&g, s, ht, hv, dt, dv, lambda, AdvWiring::Paper).unwrap().0
    } else {
        adversarial_j(&g, s, ht, hv, dt, dv, AdvWiring::Paper).unwrap().0
    };
    let v = g.scalar(loss);
    (v, g.backward(loss).unwrap())
}

#[test]
fn zero_lambda_blocks_head_gradients() {
    let (s, dec, dt, dv, x) = heads_and_discs(3);
    let (_, grads) = objective_grads(&s, &dec, &dt, &dv, &x, 0.0, true);
    for id in dec.text_params().into_iter().chain(dec.vision_params()) {
        assert!(grads.param(id).unwrap().iter().all(|&v| v == 0.0));
    }
    assert!(grads.param(dt.mlp.l1.weight).unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn single_pass_splits_directions() {
    let lambda = 0.25;
    let (s, dec, dt, dv, x) = heads_and_discs(4);
    let (_, with) = objective_grads(&s, &dec, &dt, &dv, &x, lambda, true);
    let (_, plain) = objective_grads(&s, &dec, &dt, &dv, &x, lambda, false);
    // discriminators descend -J, i.e. ascend J
    for id in dt.params().into_iter().chain(dv.params()) {
        for (a, b) in with.param(id).unwrap().iter().zip(plain.param(id).unwrap()) {
            assert!((a + b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
    // heads descend lambda * J
    for id in dec.text_params().into_iter().chain(dec.vision_params()) {
        for (a, b) in with.param(id).unwrap().iter().zip(plain.param(id).unwrap()) {
            assert!((a - lambda * b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

fn step_changes_j(seed: u64, train_discs: bool) -> (f64, f64) {
    let (mut s, dec, dt, dv, x) = heads_and_discs(seed);
    let g = Graph::new();
    let xv = g.constant(&x).unwrap();
    let (ht, hv) = dec.decouple(&g, &s, xv).unwrap();
    let (ht, hv) = (g.value(ht), g.value(hv));
    let before = j_value(&s, &dt, &dv, &ht, &hv);
    let (_, grads) = objective_grads(&s, &dec, &dt, &dv, &x, 1.0, true);
    let group: Vec<_> = if train_discs {
        dt.params().into_iter().chain(dv.params()).collect()
    } else {
        dec.text_params().into_iter().chain(dec.vision_params()).collect()
    };
    let mut frozen = s.clone();
    let others: Vec<_> = s.ids().filter(|id| !group.contains(id)).collect();
    frozen.set_trainable(&others, false);
    frozen.accumulate(&grads).unwrap();
    Optimizer::new(OptimizerConfig::sgd(1e-3), group).step(&mut frozen).unwrap();
    s = frozen;
    let g = Graph::new();
    let xv = g.constant(&x).unwrap();
    let (ht, hv) = dec.decouple(&g, &s, xv).unwrap();
    let after = j_value(&s, &dt, &dv, &g.value(ht), &g.value(hv));
    (before, after)
}

#[test]
fn discriminator_step_raises_j() {
    let failures = (0..20)
        .filter(|&seed| {
            let (b, a) = step_changes_j(seed, true);
            a < b
        })
        .count();
    assert!(failures <= 2, "{failures} failures");
}

#[test]
fn head_step_lowers_j() {
    let failures = (0..20)
        .filter(|&seed| {
            let (b, a) = step_changes_j(100 + seed, false);
            a > b
        })
        .count();
    assert!(failures <= 2, "{failures} failures");
}

#[test]
fn objective_grad_check() {
    for wiring in [AdvWiring::Paper, AdvWiring::Confusion] {
        let (s, dt, dv, mut r) = setup(5, 3);
        let ht = Tensor::randn(&[5, 3], 1.0, &mut r);
        let hv = Tensor::randn(&[5, 3], 1.0, &mut r);
        let rep = grad_check(
            "adv inputs",
            &[ht.clone(), hv.clone()],
            |g, v| Ok(adversarial_j(g, &s, v[0], v[1], &dt, &dv, wiring)?.0),
            1e-4,
        );
        assert!(rep.passed, "{rep:?}");
        let ids: Vec<_> = s.ids().collect();
        let rep = grad_check_params(
            "adv params",
            &s,
            &ids,
            48,
            |g, st| {
                let (a, b) = (g.constant(&ht)?, g.constant(&hv)?);
                Ok(adversarial_j(g, st, a, b, &dt, &dv, wiring)?.0)
            },
            1e-4,
        );
        assert!(rep.passed, "{rep:?}");
    }
}

fn gaussian_rows(r: &mut ChaCha8Rng, n: usize, dim: usize, mean: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| mean + r.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

#[test]
fn jsd_identical_is_zero() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let p = gaussian_rows(&mut r, 200, 3, 0.0);
    let rep = jsd_diagnostic(&p, &p).unwrap();
    assert_eq!(rep.value, 0.0);
}

#[test]
fn jsd_degenerate_flag() {
    let p = vec![vec![1.0, 2.0]; 60];
    let rep = jsd_diagnostic(&p, &p).unwrap();
    assert!(rep.degenerate);
    assert_eq!(rep.value, 0.0);
    assert!(matches!(jsd_diagnostic(&p[..10], &p), Err(Error::Contract(_))));
}

#[test]
fn jsd_disjoint_is_ln2() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let p = gaussian_rows(&mut r, 500, 2, 0.0);
    let q: Vec<Vec<f64>> = gaussian_rows(&mut r, 500, 2, 0.0)
        .into_iter()
        .map(|v| v.iter().map(|x| 0.1 * x + 20.0).collect())
        .collect();
    let p: Vec<Vec<f64>> = p.into_iter().map(|v| v.iter().map(|x| 0.1 * x).collect()).collect();
    let rep = jsd_diagnostic(&p, &q).unwrap();
    assert!((rep.value - 2f64.ln()).abs() < 0.01, "{rep:?}");
}

/// Quadrature of the JSD between N(0,1) and N(mu,1).
fn gaussian_jsd(mu: f64) -> f64 {
    let pdf = |x: f64, m: f64| (-(x - m).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (lo, hi, n) = (-12.0, mu + 12.0, 20_000);
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let (p, q) = (pdf(x, 0.0), pdf(x, mu));
        let m = 0.5 * (p + q);
        let t = |a: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
        0.5 * t(p) + 0.5 * t(q)
    };
    (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            w * f(lo + i as f64 * h)
        })
        .sum::<f64>()
        * h
        / 3.0
}

#[test]
fn jsd_gaussians_match_quadrature() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let p = gaussian_rows(&mut r, 10_000, 1, 0.0);
    let q = gaussian_rows(&mut r, 10_000, 1, 3.0);
    let est = jsd_diagnostic(&p, &q).unwrap().value;
    let exact = gaussian_jsd(3.0);
    assert!((est - exact).abs() < 0.05, "{est} vs {exact}");
    assert!(est <= 2f64.ln() + 0.02);
}

#[test]
fn outputs_stay_clamped() {
    let (mut s, dt, _, _) = setup(9, 2);
    s.get_mut(dt.mlp.l2.bias.unwrap()).data_mut().fill(1e3);
    let g = Graph::new();
    let h = g.constant(&Tensor::from_rows(&[vec![1e3, -1e3]])).unwrap();
    let p = g.scalar(dt.forward(&g, &s, h).unwrap());
    assert!((EPS_P..=1.0 - EPS_P).contains(&p));
}
