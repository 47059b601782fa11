use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{grad_check, grad_check_params};

fn vec1(g: &Graph, v: &[f64]) -> Var {
    g.constant(&Tensor::new(vec![v.len()], v.to_vec()).unwrap()).unwrap()
}

fn ce(p: &[f64], y: &[f64], variant: CeVariant) -> f64 {
    let g = Graph::new();
    let out = ce_loss(&g, vec1(&g, p), vec1(&g, y), variant).unwrap();
    g.scalar(out)
}

fn dice(p: &[f64], y: &[f64]) -> f64 {
    let g = Graph::new();
    let out = dice_loss(&g, vec1(&g, p), vec1(&g, y), 1e-6).unwrap();
    g.scalar(out)
}

#[test]
fn ce_examples() {
    assert_eq!(ce(&[0.0, 1.0, 1.0], &[0.0, 1.0, 1.0], CeVariant::PaperSquaredError), 0.0);
    assert!((ce(&[1.0, 0.0], &[0.0, 1.0], CeVariant::PaperSquaredError) - 1.0).abs() < 1e-9);
    assert!((ce(&[0.5], &[1.0], CeVariant::Bce) - 2f64.ln()).abs() < 1e-9);
    assert!((ce(&[0.5], &[1.0], CeVariant::Bce) - 0.6931).abs() < 1e-4);
}

#[test]
fn dice_examples() {
    let eps = 1e-6;
    assert!(dice(&[1.0; 4], &[1.0; 4]).abs() < 1e-9);
    assert!((dice(&[0.0; 4], &[1.0; 4]) - (1.0 - eps / (4.0 + eps))).abs() < 1e-9);
    let v = dice(&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0]);
    assert!((v - (1.0 - (2.0 + eps) / (3.0 + eps))).abs() < 1e-9);
    assert!((v - 1.0 / 3.0).abs() < 1e-6);
    assert!((dice(&[0.5; 4], &[1.0, 1.0, 0.0, 0.0]) - 0.5).abs() < 1e-6);
}

#[test]
fn length_mismatch() {
    let g = Graph::new();
    let (a, b) = (vec1(&g, &[0.5; 3]), vec1(&g, &[1.0; 4]));
    assert!(matches!(ce_loss(&g, a, b, CeVariant::Bce), Err(Error::Shape(_))));
    assert!(matches!(dice_loss(&g, a, b, 1e-6), Err(Error::Shape(_))));
}

fn learned_gate(seed: u64) -> (ParamStore, FusionGate) {
    let mut s = ParamStore::new();
    let gate = FusionGate::new(&mut s, GateMode::Learned, 0.5).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    s.get_mut(gate.param).data_mut().copy_from_slice(Tensor::randn(&[3], 1.0, &mut r).data());
    (s, gate)
}

#[test]
fn fusion_examples() {
    let g = Graph::new();
    let mut s = ParamStore::new();
    let one = FusionGate::new(&mut s, GateMode::Fixed, 1.0).unwrap();
    let half = FusionGate::new(&mut ParamStore::new(), GateMode::Fixed, 0.5).unwrap();
    let t = g.constant(&Tensor::from_rows(&[vec![2.0, -0.3, 7.1]])).unwrap();
    let v = g.constant(&Tensor::from_rows(&[vec![0.0, 1.9, -4.4]])).unwrap();
    assert_eq!(g.value(fuse_masks(&g, &s, &one, t, v).unwrap()), g.value(t));
    let f = g.value(fuse_masks(&g, &s, &half, t, v).unwrap());
    assert_eq!(f.data()[0], 1.0);
    assert!(FusionGate::new(&mut ParamStore::new(), GateMode::Fixed, 1.5).is_err());
}

#[test]
fn learned_gate_init_is_half() {
    let mut s = ParamStore::new();
    let gate = FusionGate::new(&mut s, GateMode::Learned, 0.5).unwrap();
    let g = Graph::new();
    let t = g.constant(&Tensor::from_rows(&[vec![3.0, -1.0]])).unwrap();
    let gv = g.value(gate.gate(&g, &s, t, t).unwrap());
    assert_eq!(gv.data(), &[0.5, 0.5]);
}

fn perfect(mask: &[f64]) -> Tensor {
    Tensor::new(vec![1, mask.len()], mask.iter().map(|&m| if m > 0.5 { 20.0 } else { -20.0 }).collect()).unwrap()
}

#[test]
fn perfect_predictions_small_total() {
    let mask = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let g = Graph::new();
    let l = perfect(&mask);
    let (t, v, f) = (g.constant(&l).unwrap(), g.constant(&l).unwrap(), g.constant(&l).unwrap());
    let m = g.constant(&Tensor::new(vec![1, 6], mask.to_vec()).unwrap()).unwrap();
    let w = LossWeights {
        lambda_adv: 0.0,
        lambda_club: 0.0,
        lambda_ortho: 0.0,
        ..Default::default()
    };
    let club = g.constant(&Tensor::scalar(0.7)).unwrap();
    let aux = AuxTerms {
        club: Some(club),
        ortho: Some(club),
        ..Default::default()
    };
    let (obj, b) = triple_supervision(&g, t, v, f, m, m, aux, &w).unwrap();
    assert!(b.total <= 3e-3, "{b:?}");
    assert_eq!((b.adv, b.club, b.ortho), (0.0, 0.0, 0.0));
    assert!((g.scalar(obj) - b.total).abs() < 1e-12);
    assert_eq!(b.mask_text, b.mask_visual);
    assert_eq!(b.mask_visual, b.mask_fused);
}

#[test]
fn weighted_aux_terms() {
    let g = Graph::new();
    let l = g.constant(&Tensor::from_rows(&[vec![0.3, -0.2]])).unwrap();
    let m = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0]])).unwrap();
    let c = g.constant(&Tensor::scalar(2.0)).unwrap();
    let aux = AuxTerms {
        club: Some(c),
        ortho: Some(c),
        l_text: 0.25,
        ..Default::default()
    };
    let w = LossWeights::default();
    let (obj, b) = triple_supervision(&g, l, l, l, m, m, aux, &w).unwrap();
    assert!((b.club - 0.2).abs() < 1e-15);
    assert!((b.ortho - 0.02).abs() < 1e-15);
    assert!((g.scalar(obj) - b.total).abs() < 1e-12);
}

#[test]
fn loss_grad_checks() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let logits = Tensor::randn(&[2, 8], 1.5, &mut r);
    let target = Tensor::new(vec![2, 8], (0..16).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect()).unwrap();
    for variant in [CeVariant::Bce, CeVariant::PaperSquaredError] {
        let w = LossWeights { ce_variant: variant, ..Default::default() };
        let rep = grad_check(
            "mask losses",
            &[logits.clone()],
            |g, v| {
                let (c, d) = mask_losses(g, v[0], g.constant(&target)?, &w)?;
                g.add(c, d)
            },
            1e-4,
        );
        assert!(rep.passed, "{rep:?}");
    }
    let (s, gate) = learned_gate(4);
    let other = Tensor::randn(&[2, 8], 1.5, &mut r);
    let rep = grad_check(
        "fusion inputs",
        &[logits.clone(), other.clone()],
        |g, v| g.sum(g.square(fuse_masks(g, &s, &gate, v[0], v[1])?)?),
        1e-4,
    );
    assert!(rep.passed, "{rep:?}");
    let rep = grad_check_params(
        "fusion gate",
        &s,
        &[gate.param],
        3,
        |g, st| {
            let f = fuse_masks(g, st, &gate, g.constant(&logits)?, g.constant(&other)?)?;
            g.sum(g.square(f)?)
        },
        1e-4,
    );
    assert!(rep.passed, "{rep:?}");
    let third = Tensor::randn(&[2, 8], 1.5, &mut r);
    let rep = grad_check(
        "triple",
        &[logits.clone(), other.clone(), third],
        |g, v| {
            let m = g.constant(&target)?;
            Ok(triple_supervision(g, v[0], v[1], v[2], m, m, AuxTerms::default(), &LossWeights::default())?.0)
        },
        1e-4,
    );
    assert!(rep.passed, "{rep:?}");
}

fn dyadic() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0u32..=64, 0u32..=1), 1..40)
        .prop_map(|v| v.into_iter().map(|(p, y)| (p as f64 / 64.0, y as f64)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ranges(pairs in dyadic()) {
        let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let d = dice(&p, &y);
        prop_assert!((0.0..=1.0).contains(&d));
        let sq = ce(&p, &y, CeVariant::PaperSquaredError);
        prop_assert!((0.0..=1.0).contains(&sq));
        prop_assert!(ce(&p, &y, CeVariant::Bce) >= 0.0);
    }

    #[test]
    fn dice_permutation_invariant(pairs in dyadic(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (ps, ys): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
        prop_assert_eq!(dice(&p, &y), dice(&ps, &ys));
    }

    #[test]
    fn agreeing_branches_pass_through(xs in prop::collection::vec(-30f64..30.0, 1..20), seed in any::<u64>()) {
        let (s, gate) = learned_gate(seed);
        let g = Graph::new();
        let t = g.constant(&Tensor::new(vec![1, xs.len()], xs.clone()).unwrap()).unwrap();
        let v = g.constant(&Tensor::new(vec![1, xs.len()], xs.clone()).unwrap()).unwrap();
        let f = g.value(fuse_masks(&g, &s, &gate, t, v).unwrap());
        prop_assert_eq!(f.data(), &xs[..]);
    }
}
