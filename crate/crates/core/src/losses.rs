//! Mask losses, dual-mask fusion and the triple-supervision objective.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before `log`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeVariant {
    Bce,
    PaperSquaredError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_club: f64,
    pub lambda_ortho: f64,
    pub ce_variant: CeVariant,
    pub epsilon_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 0.1,
            lambda_club: 0.1,
            lambda_ortho: 0.01,
            ce_variant: CeVariant::Bce,
            epsilon_dice: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_adv, self.lambda_club, self.lambda_ortho];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {l:?}")));
        }
        if !(self.epsilon_dice > 0.0) {
            return Err(Error::Config("epsilon_dice must be > 0".into()));
        }
        Ok(())
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

/// Mean pixel-wise cross-entropy on probabilities.
pub fn ce_loss(g: &Graph, pred: Var, target: Var, variant: CeVariant) -> Result<Var> {
    same_shape(g, pred, target, "ce_loss")?;
    match variant {
        CeVariant::PaperSquaredError => g.mean(g.square(g.sub(pred, target)?)?),
        CeVariant::Bce => {
            let p = g.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
            let pos = g.mul(target, g.log(p)?)?;
            let one_minus = |v: Var| g.add_scalar(g.neg(v)?, 1.0);
            let neg = g.mul(one_minus(target)?, g.log(one_minus(p)?)?)?;
            g.neg(g.mean(g.add(pos, neg)?)?)
        }
    }
}

fn as_rows(g: &Graph, v: Var) -> Result<Var> {
    let s = g.shape(v);
    match s.len() {
        2 => Ok(v),
        _ => g.reshape(v, &[1, s.iter().product()]),
    }
}

/// `1 - (2Σyŷ + ε) / (Σy + Σŷ + ε)` per row of a `[B, N]` batch, averaged
/// over rows. Vectors count as a single row.
pub fn dice_loss(g: &Graph, pred: Var, target: Var, eps: f64) -> Result<Var> {
    same_shape(g, pred, target, "dice_loss")?;
    let (p, y) = (as_rows(g, pred)?, as_rows(g, target)?);
    let inter = g.add_scalar(g.scale(g.sum_axis(g.mul(p, y)?, 1)?, 2.0)?, eps)?;
    let total = g.add_scalar(g.add(g.sum_axis(p, 1)?, g.sum_axis(y, 1)?)?, eps)?;
    g.add_scalar(g.neg(g.mean(g.div(inter, total)?)?)?, 1.0)
}

/// `(ce, dice)` of `sigmoid(logits)` against a 0/1 target.
pub fn mask_losses(g: &Graph, logits: Var, target: Var, w: &LossWeights) -> Result<(Var, Var)> {
    let p = g.sigmoid(logits)?;
    Ok((ce_loss(g, p, target, w.ce_variant)?, dice_loss(g, p, target, w.epsilon_dice)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Learned,
    Fixed,
}

/// Per-pixel gate `g = sigmoid(a * text + b * visual + c)`, or a constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionGate {
    pub mode: GateMode,
    pub fixed: f64,
    /// `[1, 3]` holding `(a, b, c)`; initialised to zero, i.e. `g = 0.5`.
    pub param: ParamId,
}

impl FusionGate {
    pub fn new(store: &mut ParamStore, mode: GateMode, fixed: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fixed) {
            return Err(Error::Config(format!("fixed gate {fixed} outside [0, 1]")));
        }
        Ok(FusionGate {
            mode,
            fixed,
            param: store.add("fusion.gate", Tensor::zeros(&[1, 3])),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self.mode {
            GateMode::Learned => vec![self.param],
            GateMode::Fixed => vec![],
        }
    }

    pub fn gate(&self, g: &Graph, store: &ParamStore, text: Var, visual: Var) -> Result<Var> {
        same_shape(g, text, visual, "fuse_masks")?;
        let shape = g.shape(text);
        match self.mode {
            GateMode::Fixed => g.constant(&Tensor::full(&shape, self.fixed)),
            GateMode::Learned => {
                let rank = shape.len();
                let p = g.param(store, self.param)?;
                let coef = |i: usize| -> Result<Var> {
                    let c = g.slice(p, 1, i, i + 1)?;
                    let c = if rank == 2 { c } else { g.reshape(c, &vec![1; rank])? };
                    g.broadcast(c, &shape)
                };
                let z = g.add(g.add(g.mul(coef(0)?, text)?, g.mul(coef(1)?, visual)?)?, coef(2)?)?;
                g.sigmoid(z)
            }
        }
    }
}

/// `g ⊙ text + (1 - g) ⊙ visual`, written as `text - (1 - g) ⊙ (text - visual)`
/// so that agreeing inputs and `g = 1` return `text` exactly.
pub fn fuse_masks(g: &Graph, store: &ParamStore, gate: &FusionGate, text: Var, visual: Var) -> Result<Var> {
    let gv = gate.gate(g, store, text, visual)?;
    let rest = g.add_scalar(g.neg(gv)?, 1.0)?;
    g.sub(text, g.mul(rest, g.sub(text, visual)?)?)
}

/// Auxiliary terms feeding the triple-supervision objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct AuxTerms {
    /// `(-J behind gradient reversal, J)` from the adversary.
    pub adv: Option<(Var, f64)>,
    pub club: Option<Var>,
    pub ortho: Option<Var>,
    /// External text-generation loss; no counterpart here, reported as given.
    pub l_text: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_text: f64,
    pub dice_text: f64,
    pub ce_visual: f64,
    pub dice_visual: f64,
    pub ce_fused: f64,
    pub dice_fused: f64,
    pub mask_text: f64,
    pub mask_visual: f64,
    pub mask_fused: f64,
    /// `lambda_adv * J`.
    pub adv: f64,
    /// `lambda_club * I_CLUB`.
    pub club: f64,
    /// `lambda_ortho * L_ortho`.
    pub ortho: f64,
    pub l_text: f64,
    pub total: f64,
}

fn named(term: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(m) => Error::Numeric(format!("{term}: {m}")),
        other => other,
    }
}

fn finite(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{term} is not finite")))
    }
}

/// Sums the three mask losses and the weighted auxiliary terms.
///
/// The returned variable is the objective to differentiate. It differs from
/// `breakdown.total` only in the adversarial term, which enters as the
/// discriminators' `-J` behind gradient reversal.
#[allow(clippy::too_many_arguments)]
pub fn triple_supervision(
    g: &Graph,
    text_logits: Var,
    visual_logits: Var,
    fused_logits: Var,
    label_mask: Var,
    gt_mask: Var,
    aux: AuxTerms,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let (ct, dt) = mask_losses(g, text_logits, label_mask, w).map_err(named("text mask"))?;
    let (cv, dv) = mask_losses(g, visual_logits, gt_mask, w).map_err(named("visual mask"))?;
    let (cf, df) = mask_losses(g, fused_logits, gt_mask, w).map_err(named("fused mask"))?;
    let mut b = LossBreakdown {
        ce_text: finite("ce_text", g.scalar(ct))?,
        dice_text: finite("dice_text", g.scalar(dt))?,
        ce_visual: finite("ce_visual", g.scalar(cv))?,
        dice_visual: finite("dice_visual", g.scalar(dv))?,
        ce_fused: finite("ce_fused", g.scalar(cf))?,
        dice_fused: finite("dice_fused", g.scalar(df))?,
        l_text: finite("l_text", aux.l_text)?,
        ..Default::default()
    };
    b.mask_text = b.ce_text + b.dice_text;
    b.mask_visual = b.ce_visual + b.dice_visual;
    b.mask_fused = b.ce_fused + b.dice_fused;

    let mut obj = g.add(g.add(ct, dt)?, g.add(cv, dv)?)?;
    obj = g.add(obj, g.add(cf, df)?)?;
    if let Some((minmax, j)) = aux.adv {
        b.adv = w.lambda_adv * finite("adv", j)?;
        obj = g.add(obj, minmax)?;
    }
    if let Some(c) = aux.club {
        b.club = w.lambda_club * finite("club", g.scalar(c))?;
        if w.lambda_club != 0.0 {
            obj = g.add(obj, g.scale(c, w.lambda_club)?)?;
        }
    }
    if let Some(o) = aux.ortho {
        b.ortho = w.lambda_ortho * finite("ortho", g.scalar(o))?;
        if w.lambda_ortho != 0.0 {
            obj = g.add(obj, g.scale(o, w.lambda_ortho)?)?;
        }
    }
    if b.l_text != 0.0 {
        obj = g.add_scalar(obj, b.l_text)?;
    }
    b.total = b.mask_text + b.mask_visual + b.mask_fused + b.adv + b.club + b.ortho + b.l_text;
    Ok((obj, b))
}

#[cfg(test)]
mod tests;
