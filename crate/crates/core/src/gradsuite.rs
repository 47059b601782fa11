//! The finite-difference suite behind `dsva grad-check`: every graph op and
//! every differentiable component, each at relative tolerance `1e-4`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{adv_objective, adversarial_j, AdvWiring, Discriminator, Role};
use crate::club::{club_estimate, VariationalQ};
use crate::decoupler::{ortho_loss, Decoupler};
use crate::diffcore::{
    grad_check, grad_check_params, rel_err, GradCheckEntry, GradCheckReport, Graph, OpKind, ParamStore, Tensor,
    FD_STEP,
};
use crate::error::Result;
use crate::losses::{fuse_masks, mask_losses, triple_supervision, AuxTerms, CeVariant, FusionGate, GateMode, LossWeights};
use crate::segcore::{DecoderPath, ImageBatch, ImageEncoder, MaskDecoder, TextPrompter, BLOCKS, EMBED, PATCH};

pub const SUITE_TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn op_reports(out: &mut Vec<GradCheckReport>) -> Result<()> {
    let mut r = rng(7);
    let m = Tensor::randn(&[3, 4], 1.0, &mut r);
    let n = Tensor::randn(&[4, 2], 1.0, &mut r);
    let same = Tensor::randn(&[3, 4], 1.0, &mut r);
    let row = Tensor::randn(&[1, 4], 1.0, &mut r);
    let pos = Tensor::new(
        vec![3, 4],
        Tensor::uniform(&[3, 4], 1.0, &mut r).data().iter().map(|v| v.abs() + 0.5).collect(),
    )?;
    let weights = Tensor::randn(&[64], 1.0, &mut r);
    let cases: Vec<(OpKind, Vec<Tensor>)> = vec![
        (OpKind::MatMul, vec![m.clone(), n]),
        (OpKind::Add, vec![m.clone(), row.clone()]),
        (OpKind::Multiply, vec![m.clone(), same.clone()]),
        (OpKind::Subtract, vec![m.clone(), row.clone()]),
        (OpKind::Divide, vec![m.clone(), pos.clone()]),
        (OpKind::Negate, vec![m.clone()]),
        (OpKind::Sum, vec![m.clone()]),
        (OpKind::Mean, vec![m.clone()]),
        (OpKind::Sigmoid, vec![m.clone()]),
        (OpKind::LeakyRelu(0.2), vec![m.clone()]),
        (OpKind::Log, vec![pos]),
        (OpKind::Exp, vec![m.clone()]),
        (OpKind::Square, vec![m.clone()]),
        (OpKind::Concat(0), vec![m.clone(), row.clone()]),
        (OpKind::Concat(1), vec![m.clone(), same]),
        (OpKind::Slice(0, 1, 3), vec![m.clone()]),
        (OpKind::Slice(1, 1, 3), vec![m.clone()]),
        (OpKind::Broadcast, vec![row, m.clone()]),
        (OpKind::Transpose, vec![m.clone()]),
        (OpKind::SoftmaxRows, vec![m.clone()]),
        (OpKind::LogSumExpRows, vec![m.clone()]),
        (OpKind::Clamp(-0.5, 0.5), vec![m.clone()]),
    ];
    let readout = |g: &Graph, y| -> Result<_> {
        let shape = g.shape(y);
        let k: usize = shape.iter().product();
        let w = g.constant(&Tensor::new(shape, weights.data()[..k].to_vec())?)?;
        g.sum(g.mul(y, w)?)
    };
    for (kind, inputs) in cases {
        out.push(grad_check(
            &format!("op {kind:?}"),
            &inputs,
            |g, v| readout(g, g.forward_op(kind, v)?),
            SUITE_TOL,
        ));
    }
    let x = Tensor::randn(&[3, 3], 1.0, &mut r);
    out.push(grad_check(
        "op scale/add_scalar/reshape/sum_axis",
        &[m],
        |g, v| {
            let y = g.add_scalar(g.scale(v[0], 1.7)?, -0.3)?;
            let y = g.sum_axis(g.reshape(y, &[4, 3])?, 0)?;
            readout(g, y)
        },
        SUITE_TOL,
    ));
    out.push(grad_check(
        "op upsample_bilinear",
        &[x],
        |g, v| readout(g, g.reshape(g.upsample_bilinear(v[0], 8, 8)?, &[1, 64])?),
        SUITE_TOL,
    ));
    Ok(())
}

/// Analytic GRL-wrapped gradients against `-lambda` times the finite
/// differences of the unwrapped function.
fn grl_report() -> Result<GradCheckReport> {
    let mut r = rng(11);
    let x = Tensor::randn(&[2, 3], 1.0, &mut r);
    let lambda = 0.37;
    let f = |g: &Graph, v, wrap: bool| -> Result<_> {
        let h = if wrap { g.gradient_reversal(v, lambda)? } else { v };
        g.sum(g.sigmoid(g.square(h)?)?)
    };
    let g = Graph::new();
    let v = g.variable(&x)?;
    let grads = g.backward(f(&g, v, true)?)?;
    let analytic = grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_default();
    let eval = |t: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(t)?;
        Ok(g.scalar(f(&g, v, false)?))
    };
    let mut entry = GradCheckEntry {
        name: "grl composition".into(),
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    for j in 0..x.numel() {
        let mut up = x.clone();
        up.data_mut()[j] += FD_STEP;
        let mut down = x.clone();
        down.data_mut()[j] -= FD_STEP;
        let numeric = -lambda * (eval(&up)? - eval(&down)?) / (2.0 * FD_STEP);
        let a = analytic.get(j).copied().unwrap_or(f64::NAN);
        entry.checked += 1;
        entry.max_rel_err = entry.max_rel_err.max(rel_err(a, numeric));
        entry.max_abs_err = entry.max_abs_err.max((a - numeric).abs());
    }
    let passed = entry.checked == x.numel() && entry.max_rel_err <= SUITE_TOL;
    Ok(GradCheckReport {
        name: "gradient reversal".into(),
        tolerance: SUITE_TOL,
        entries: vec![entry],
        passed,
    })
}

fn decoupler_reports(out: &mut Vec<GradCheckReport>) -> Result<()> {
    let mut r = rng(21);
    let mut store = ParamStore::new();
    let d = Decoupler::new(&mut store, 6, 4, &mut r);
    let x = Tensor::randn(&[5, 6], 1.0, &mut r);
    let (wt, wv) = (Tensor::randn(&[5, 4], 1.0, &mut r), Tensor::randn(&[5, 4], 1.0, &mut r));
    let mut ids = d.text_params();
    ids.extend(d.vision_params());
    ids.extend(d.real_text_params());
    out.push(grad_check_params(
        "projections",
        &store,
        &ids,
        24,
        |g, s| {
            let xv = g.constant(&x)?;
            let (ht, hv) = d.decouple(g, s, xv)?;
            let hr = d.encode_real_text(g, s, xv)?;
            let a = g.sum(g.mul(ht, g.constant(&wt)?)?)?;
            let b = g.sum(g.mul(g.add(hv, hr)?, g.constant(&wv)?)?)?;
            g.add(a, b)
        },
        SUITE_TOL,
    ));
    let a = Tensor::randn(&[4, 3], 1.0, &mut r);
    let b = Tensor::randn(&[4, 3], 1.0, &mut r);
    out.push(grad_check("ortho_loss", &[a, b], |g, v| ortho_loss(g, v[0], v[1]), SUITE_TOL));
    Ok(())
}

fn adversary_reports(out: &mut Vec<GradCheckReport>) -> Result<()> {
    for wiring in [AdvWiring::Paper, AdvWiring::Confusion] {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let dt = Discriminator::new(&mut store, Role::Text, 3, 0.2, &mut r);
        let dv = Discriminator::new(&mut store, Role::Vision, 3, 0.2, &mut r);
        let ht = Tensor::randn(&[5, 3], 1.0, &mut r);
        let hv = Tensor::randn(&[5, 3], 1.0, &mut r);
        out.push(grad_check(
            &format!("adversarial objective inputs ({wiring:?})"),
            &[ht.clone(), hv.clone()],
            |g, v| Ok(adversarial_j(g, &store, v[0], v[1], &dt, &dv, wiring)?.0),
            SUITE_TOL,
        ));
        let ids: Vec<_> = store.ids().collect();
        out.push(grad_check_params(
            &format!("adversarial objective discriminators ({wiring:?})"),
            &store,
            &ids,
            48,
            |g, s| Ok(adv_objective(g, s, g.constant(&ht)?, g.constant(&hv)?, &dt, &dv, 0.1, wiring)?.0),
            SUITE_TOL,
        ));
    }
    Ok(())
}

fn club_reports(out: &mut Vec<GradCheckReport>) -> Result<()> {
    for m in [1, 3] {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let q = VariationalQ::new(&mut store, "q", 2, 6, m, &mut r);
        let ht = Tensor::randn(&[5, 2], 1.0, &mut r);
        let hv = Tensor::randn(&[5, 2], 1.0, &mut r);
        out.push(grad_check(
            &format!("q_log_prob (mixtures {m})"),
            &[ht.clone(), hv.clone()],
            |g, v| g.sum(q.log_prob(g, &store, v[0], v[1])?),
            SUITE_TOL,
        ));
        out.push(grad_check(
            &format!("club_estimate inputs (mixtures {m})"),
            &[ht.clone(), hv.clone()],
            |g, v| club_estimate(g, &store, &q, v[0], v[1]),
            SUITE_TOL,
        ));
        out.push(grad_check_params(
            &format!("club_estimate q params (mixtures {m})"),
            &store,
            &q.params(),
            24,
            |g, s| club_estimate(g, s, &q, g.constant(&ht)?, g.constant(&hv)?),
            SUITE_TOL,
        ));
    }
    Ok(())
}

fn loss_reports(out: &mut Vec<GradCheckReport>) -> Result<()> {
    let mut r = rng(3);
    let logits = Tensor::randn(&[2, 8], 1.5, &mut r);
    let target = Tensor::new(vec![2, 8], (0..16).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect())?;
    for variant in [CeVariant::Bce, CeVariant::PaperSquaredError] {
        let w = LossWeights {
            ce_variant: variant,
            ..Default::default()
        };
        out.push(grad_check(
            &format!("ce + dice ({variant:?})"),
            &[logits.clone()],
            |g, v| {
                let (c, d) = mask_losses(g, v[0], g.constant(&target)?, &w)?;
                g.add(c, d)
            },
            SUITE_TOL,
        ));
    }
    let mut store = ParamStore::new();
    let gate = FusionGate::new(&mut store, GateMode::Learned, 0.5)?;
    store
        .get_mut(gate.param)
        .data_mut()
        .copy_from_slice(&[0.3, -0.2, 0.1]);
    let other = Tensor::randn(&[2, 8], 1.5, &mut r);
    out.push(grad_check(
        "fusion inputs",
        &[logits.clone(), other.clone()],
        |g, v| g.sum(g.square(fuse_masks(g, &store, &gate, v[0], v[1])?)?),
        SUITE_TOL,
    ));
    out.push(grad_check_params(
        "fusion gate",
        &store,
        &[gate.param],
        3,
        |g, s| g.sum(g.square(fuse_masks(g, s, &gate, g.constant(&logits)?, g.constant(&other)?)?)?),
        SUITE_TOL,
    ));
    let third = Tensor::randn(&[2, 8], 1.5, &mut r);
    out.push(grad_check(
        "triple supervision",
        &[logits, other, third],
        |g, v| {
            let m = g.constant(&target)?;
            Ok(triple_supervision(g, v[0], v[1], v[2], m, m, AuxTerms::default(), &LossWeights::default())?.0)
        },
        SUITE_TOL,
    ));
    Ok(())
}

/// Encoder, prompter, real-text head and one decoder path on 16x16 images,
/// with a dense prompt, through a linear readout of logits and mask token.
fn decode_report() -> Result<GradCheckReport> {
    let side = 16;
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, 0.2, &mut r);
    let dec = MaskDecoder::new(&mut store, DecoderPath::TextDecoder, side / PATCH, BLOCKS, 0.2, &mut r);
    let prompter = TextPrompter::new(&mut store, 8, EMBED, &mut r);
    let coupler = Decoupler::new(&mut store, 8, EMBED, &mut r);
    let mut r = rng(11);
    store
        .get_mut(dec.dense_lift.weight)
        .data_mut()
        .copy_from_slice(Tensor::randn(&[1, EMBED], 0.5, &mut r).data());
    let mut ir = rng(12);
    let mut batch = ImageBatch::new(side, side);
    for i in 0..2 {
        let img: Vec<f32> = (0..side * side * 3).map(|_| ir.random::<f32>()).collect();
        batch.push(i, &img)?;
    }
    let pix = side * side;
    let target = Tensor::randn(&[2, pix], 1.0, &mut r);
    let readout = Tensor::randn(&[2, EMBED], 1.0, &mut r);
    let dense = Tensor::new(vec![2, pix], (0..2 * pix).map(|i| ((i * 13) % 17) as f64 / 16.0).collect())?;
    let mut ids = enc.params();
    ids.extend(dec.params());
    ids.extend(prompter.params());
    ids.extend(coupler.real_text_params());
    Ok(grad_check_params(
        "decode_mask 16x16",
        &store,
        &ids,
        4,
        |g, s| {
            let e = enc.encode(g, s, &batch)?;
            let (p, _) = prompter.text_to_points(g, s, &coupler.real_text, &[&[0, 10], &[15, 4, 12]])?;
            let m = dec.decode(g, s, &e, &p.with_dense(Some(dense.clone())))?;
            let fit = g.mean(g.mul(m.logits, g.constant(&target)?)?)?;
            let tok = g.mean(g.mul(m.mask_token, g.constant(&readout)?)?)?;
            g.add(fit, tok)
        },
        SUITE_TOL,
    ))
}

/// Runs every check. Seeds are fixed; the result is deterministic.
pub fn gradient_suite() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    op_reports(&mut out)?;
    out.push(grl_report()?);
    decoupler_reports(&mut out)?;
    adversary_reports(&mut out)?;
    club_reports(&mut out)?;
    loss_reports(&mut out)?;
    out.push(decode_report()?);
    Ok(out)
}
