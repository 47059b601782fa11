use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::EvalSection;
use super::model::{factor_rows, fused_states, Model};
use crate::adversary::{jsd_diagnostic, JsdReport, JSD_MIN_SAMPLES};
use crate::club::club_estimate;
use crate::diffcore::{sigmoid, Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::fuse_masks;
use crate::probe::probe_r2;
use crate::segcore::write_pgm;
use crate::synthdata::Sample;

/// Held-out metrics. IoU and Dice threshold probabilities at 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub iterations: usize,
    /// Fused-mask mean IoU.
    pub miou: f64,
    /// Fused-mask cumulative IoU, `sum I / sum U`.
    pub ciou: f64,
    /// Fused-mask mean Dice score.
    pub dice: f64,
    pub miou_text: f64,
    pub miou_visual: f64,
    pub miou_fused: f64,
    /// Text decoder prompted by the real label.
    pub miou_real_text: f64,
    pub r2_text_to_text: f64,
    pub r2_text_to_vis: f64,
    pub r2_vision_to_vis: f64,
    pub r2_vision_to_text: f64,
    pub club: f64,
    /// Real-text encodings against `h_vision`; absent below the sample floor.
    pub jsd: Option<JsdReport>,
}

/// `(intersection, union)` of two thresholded masks.
pub fn overlap(pred: &[bool], gt: &[u8]) -> (usize, usize) {
    let mut i = 0;
    let mut u = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        let g = g != 0;
        i += (p && g) as usize;
        u += (p || g) as usize;
    }
    (i, u)
}

/// IoU, with two empty masks counting as a perfect match.
pub fn iou(pred: &[bool], gt: &[u8]) -> f64 {
    let (i, u) = overlap(pred, gt);
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

pub fn dice_score(pred: &[bool], gt: &[u8]) -> f64 {
    let (i, _) = overlap(pred, gt);
    let total = pred.iter().filter(|&&p| p).count() + gt.iter().filter(|&&g| g != 0).count();
    if total == 0 {
        1.0
    } else {
        2.0 * i as f64 / total as f64
    }
}

pub fn threshold(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p > 0.5).collect()
}

/// Mean IoU and cumulative IoU over paired masks.
pub fn miou_ciou(preds: &[Vec<bool>], gts: &[&[u8]]) -> Result<(f64, f64)> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::contract(format!(
            "miou over {} predictions and {} masks",
            preds.len(),
            gts.len()
        )));
    }
    let (mut si, mut su, mut m) = (0usize, 0usize, 0.0);
    for (p, g) in preds.iter().zip(gts) {
        let (i, u) = overlap(p, g);
        si += i;
        su += u;
        m += iou(p, g);
    }
    let c = if su == 0 { 1.0 } else { si as f64 / su as f64 };
    Ok((m / preds.len() as f64, c))
}

#[derive(Default)]
struct Chunk {
    text: Vec<Vec<bool>>,
    visual: Vec<Vec<bool>>,
    fused: Vec<Vec<bool>>,
    real: Vec<Vec<bool>>,
    fused_probs: Vec<Vec<f64>>,
    h_text: Vec<Vec<f64>>,
    h_vision: Vec<Vec<f64>>,
    real_enc: Vec<Vec<f64>>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn probs(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| sigmoid(v)).collect()).collect()
}

fn eval_chunk(model: &Model, samples: &[&Sample], cfg: &EvalSection) -> Result<Chunk> {
    let g = Graph::new();
    let store = &model.store;
    let emb = model.encode(&g, samples)?;
    let x = g.constant(&fused_states(samples)?)?;
    let b = model.branches(&g, &emb, x, cfg.iterations, cfg.hard_reprompt)?;
    let fused = fuse_masks(&g, store, &model.gate, b.text.logits, b.visual.logits)?;
    let real = model.real_text_path(&g, &emb, samples, cfg.iterations, cfg.hard_reprompt)?;
    let labels: Vec<&[u16]> = samples.iter().map(|s| s.scene.label.as_slice()).collect();
    let e = model.prompter.label_embedding(&g, store, &labels)?;
    let real_enc = model.decoupler.encode_real_text(&g, store, e)?;
    let fused_probs = probs(&g.value(fused));
    let th = |v| probs(&g.value(v)).iter().map(|p| threshold(p)).collect();
    Ok(Chunk {
        text: th(b.text.logits),
        visual: th(b.visual.logits),
        fused: fused_probs.iter().map(|p| threshold(p)).collect(),
        real: th(real.logits),
        fused_probs,
        h_text: rows(&g.value(b.h_text)),
        h_vision: rows(&g.value(b.h_vision)),
        real_enc: rows(&g.value(real_enc)),
    })
}

/// `(h_text, h_vision)` rows for a sample set.
pub fn decoupled_rows(model: &Model, samples: &[&Sample]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let g = Graph::new();
    let x = g.constant(&fused_states(samples)?)?;
    let (ht, hv) = model.decoupler.decouple(&g, &model.store, x)?;
    Ok((rows(&g.value(ht)), rows(&g.value(hv))))
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let env = std::env::var("DSVA_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads.or(env).filter(|&n| n > 0) {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::contract(format!("thread pool: {e}")))
}

/// Evaluates on `eval`, fitting the probes on `train`. When `dump` is set,
/// fused probabilities are written there as one PGM per scene.
pub fn evaluate(
    model: &Model,
    train: &[Sample],
    eval: &[Sample],
    cfg: &EvalSection,
    dump: Option<&Path>,
) -> Result<EvalReport> {
    if eval.is_empty() || train.is_empty() {
        return Err(Error::contract("evaluation needs non-empty train and eval sets"));
    }
    let refs: Vec<&Sample> = eval.iter().collect();
    let chunks: Vec<Chunk> = pool(None)?.install(|| {
        refs.par_chunks(cfg.chunk)
            .map(|c| eval_chunk(model, c, cfg))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut all = Chunk::default();
    for c in chunks {
        all.text.extend(c.text);
        all.visual.extend(c.visual);
        all.fused.extend(c.fused);
        all.real.extend(c.real);
        all.fused_probs.extend(c.fused_probs);
        all.h_text.extend(c.h_text);
        all.h_vision.extend(c.h_vision);
        all.real_enc.extend(c.real_enc);
    }
    let gts: Vec<&[u8]> = eval.iter().map(|s| s.scene.target_mask()).collect();
    let labels: Vec<&[u8]> = eval.iter().map(|s| s.scene.label_mask.as_slice()).collect();
    let (miou, ciou) = miou_ciou(&all.fused, &gts)?;
    let dice = all.fused.iter().zip(&gts).map(|(p, g)| dice_score(p, g)).sum::<f64>() / eval.len() as f64;

    let train_refs: Vec<&Sample> = train.iter().collect();
    let (tr_t, tr_v) = decoupled_rows(model, &train_refs)?;
    let (et, ev) = (factor_rows(&train_refs, true), factor_rows(&train_refs, false));
    let (xt, xv) = (factor_rows(&refs, true), factor_rows(&refs, false));

    let g = Graph::new();
    let club = if eval.len() >= 2 {
        let ht = g.constant(&Tensor::from_rows(&all.h_text))?;
        let hv = g.constant(&Tensor::from_rows(&all.h_vision))?;
        g.scalar(club_estimate(&g, &model.store, &model.q, ht, hv)?)
    } else {
        0.0
    };
    let jsd = if eval.len() >= JSD_MIN_SAMPLES {
        Some(jsd_diagnostic(&all.real_enc, &all.h_vision)?)
    } else {
        None
    };

    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (s, p) in eval.iter().zip(&all.fused_probs) {
            write_pgm(&dir.join(format!("{:016x}.pgm", s.scene.seed)), s.scene.height, s.scene.width, p)?;
        }
    }

    Ok(EvalReport {
        scenes: eval.len(),
        iterations: cfg.iterations,
        miou,
        ciou,
        dice,
        miou_text: miou_ciou(&all.text, &labels)?.0,
        miou_visual: miou_ciou(&all.visual, &gts)?.0,
        miou_fused: miou,
        miou_real_text: miou_ciou(&all.real, &labels)?.0,
        r2_text_to_text: probe_r2(&tr_t, &et, &all.h_text, &xt)?,
        r2_text_to_vis: probe_r2(&tr_t, &ev, &all.h_text, &xv)?,
        r2_vision_to_vis: probe_r2(&tr_v, &ev, &all.h_vision, &xv)?,
        r2_vision_to_text: probe_r2(&tr_v, &et, &all.h_vision, &xt)?,
        club,
        jsd,
    })
}
