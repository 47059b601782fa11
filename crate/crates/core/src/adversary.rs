//! Modality discriminators, the adversarial objective behind gradient
//! reversal, and a histogram JSD diagnostic.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;

/// Discriminator outputs are clamped to `[EPS_P, 1 - EPS_P]`.
pub const EPS_P: f64 = 1e-6;
pub const DISC_HIDDEN: usize = 64;
pub const JSD_BINS: usize = 32;
pub const JSD_MIN_SAMPLES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvWiring {
    /// `mean[log D_v(h_t) + log(1 - D_t(h_v))]`, as written.
    Paper,
    /// Each discriminator separates the two modalities; the heads try to
    /// make them indistinguishable.
    Confusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Text,
    Vision,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Discriminator {
    pub mlp: Mlp,
    pub role: Role,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, role: Role, hidden: usize, slope: f64, rng: &mut R) -> Self {
        let name = match role {
            Role::Text => "adv.d_text",
            Role::Vision => "adv.d_vision",
        };
        Discriminator {
            mlp: Mlp::new(store, name, (hidden, DISC_HIDDEN, 1), slope, rng),
            role,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }

    /// Clamped probabilities, `[B, 1]`.
    pub fn forward(&self, g: &Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let p = g.sigmoid(self.mlp.forward(g, store, h)?)?;
        g.clamp(p, EPS_P, 1.0 - EPS_P)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvBatchLoss {
    /// `J`.
    pub objective: f64,
    /// Loss minimised by the discriminators, `-J`.
    pub disc_loss: f64,
    /// Loss minimised by the heads, `J`.
    pub gen_loss: f64,
    pub mean_dv_ht: f64,
    pub mean_dt_hv: f64,
}

/// `J` on the given features, with no gradient reversal. Returns `J` together
/// with the `[B, 1]` outputs `D_v(h_t)` and `D_t(h_v)`.
pub fn adversarial_j(
    g: &Graph,
    store: &ParamStore,
    h_t: Var,
    h_v: Var,
    d_t: &Discriminator,
    d_v: &Discriminator,
    wiring: AdvWiring,
) -> Result<(Var, Var, Var)> {
    let (st, sv) = (g.shape(h_t), g.shape(h_v));
    if st.len() != 2 || st != sv {
        return Err(Error::shape(format!("adversary needs equal [B, H] batches, got {st:?} and {sv:?}")));
    }
    if st[0] == 0 {
        return Err(Error::contract("adversary on an empty batch"));
    }
    let dv_ht = d_v.forward(g, store, h_t)?;
    let dt_hv = d_t.forward(g, store, h_v)?;
    let log_pos = |p: Var| g.log(p);
    let log_neg = |p: Var| g.log(g.add_scalar(g.neg(p)?, 1.0)?);
    let j = match wiring {
        AdvWiring::Paper => g.mean(g.add(log_pos(dv_ht)?, log_neg(dt_hv)?)?)?,
        AdvWiring::Confusion => {
            let dt_ht = d_t.forward(g, store, h_t)?;
            let dv_hv = d_v.forward(g, store, h_v)?;
            let t = g.add(log_pos(dt_ht)?, log_neg(dt_hv)?)?;
            let v = g.add(log_pos(dv_hv)?, log_neg(dv_ht)?)?;
            g.scale(g.mean(g.add(t, v)?)?, 0.5)?
        }
    };
    Ok((j, dv_ht, dt_hv))
}

/// Adversarial term for one batch. The returned variable is `-J` evaluated on
/// `GRL(h, lambda)` inputs: minimising it moves the discriminators up the
/// gradient of `J` and the heads down `lambda * J`, in one backward pass.
#[allow(clippy::too_many_arguments)]
pub fn adv_objective(
    g: &Graph,
    store: &ParamStore,
    h_t: Var,
    h_v: Var,
    d_t: &Discriminator,
    d_v: &Discriminator,
    lambda: f64,
    wiring: AdvWiring,
) -> Result<(Var, AdvBatchLoss)> {
    let ht = g.gradient_reversal(h_t, lambda)?;
    let hv = g.gradient_reversal(h_v, lambda)?;
    let (j, dv_ht, dt_hv) = adversarial_j(g, store, ht, hv, d_t, d_v, wiring)?;
    let jv = g.scalar(j);
    let mean = |v: Var| {
        let d = g.values(v);
        d.iter().sum::<f64>() / d.len() as f64
    };
    let stats = AdvBatchLoss {
        objective: jv,
        disc_loss: -jv,
        gen_loss: jv,
        mean_dv_ht: mean(dv_ht),
        mean_dt_hv: mean(dt_hv),
    };
    Ok((g.neg(j)?, stats))
}

/// Histogram JSD estimate between two sample sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsdReport {
    pub value: f64,
    /// Set when the projected samples have no spread and the value defaults to 0.
    pub degenerate: bool,
}

/// Projects both sets onto the closed-form linear discriminant direction,
/// bins the projections into 32 shared bins and returns the JSD in nats.
pub fn jsd_diagnostic(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<JsdReport> {
    if p.len() < JSD_MIN_SAMPLES || q.len() < JSD_MIN_SAMPLES {
        return Err(Error::contract(format!(
            "jsd needs >= {JSD_MIN_SAMPLES} samples per side, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let h = p[0].len();
    if h == 0 || p.iter().chain(q).any(|r| r.len() != h) {
        return Err(Error::shape("jsd samples must share one non-zero width"));
    }
    let stats = |s: &[Vec<f64>]| {
        let m = DMatrix::from_fn(s.len(), h, |i, j| s[i][j]);
        let mean: DVector<f64> = m.row_mean().transpose();
        let mut c = DMatrix::zeros(h, h);
        for i in 0..s.len() {
            let d = m.row(i).transpose() - &mean;
            c += &d * d.transpose();
        }
        (mean, c / s.len() as f64)
    };
    let (mp, cp) = stats(p);
    let (mq, cq) = stats(q);
    let mut sw = cp + cq;
    let ridge = 1e-6 * (sw.trace() / h as f64).max(1e-12);
    for i in 0..h {
        sw[(i, i)] += ridge;
    }
    let diff = &mp - &mq;
    let w = sw
        .svd(true, true)
        .solve(&diff, 1e-12)
        .map_err(|e| Error::numeric(format!("discriminant solve failed: {e}")))?;
    let project = |s: &[Vec<f64>]| -> Vec<f64> {
        s.iter().map(|r| r.iter().zip(w.iter()).map(|(a, b)| a * b).sum()).collect()
    };
    let (zp, zq) = (project(p), project(q));
    let lo = zp.iter().chain(&zq).copied().fold(f64::INFINITY, f64::min);
    let hi = zp.iter().chain(&zq).copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12 * hi.abs().max(lo.abs()).max(1.0)) {
        log::warn!("jsd diagnostic: degenerate projection, reporting 0");
        return Ok(JsdReport {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(JsdReport {
        value: jsd_1d(&zp, &zq, lo, hi),
        degenerate: false,
    })
}

/// JSD between two 1-D samples using `JSD_BINS` equal bins over `[lo, hi]`.
pub fn jsd_1d(a: &[f64], b: &[f64], lo: f64, hi: f64) -> f64 {
    let hist = |s: &[f64]| {
        let mut h = vec![0.0; JSD_BINS];
        for &x in s {
            let k = (((x - lo) / (hi - lo)) * JSD_BINS as f64).floor();
            h[(k.max(0.0) as usize).min(JSD_BINS - 1)] += 1.0;
        }
        h.iter_mut().for_each(|v| *v /= s.len() as f64);
        h
    };
    let (pa, pb) = (hist(a), hist(b));
    let kl = |x: f64, m: f64| if x > 0.0 { x * (x / m).ln() } else { 0.0 };
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| {
            let m = 0.5 * (x + y);
            0.5 * kl(x, m) + 0.5 * kl(y, m)
        })
        .sum()
}

#[cfg(test)]
mod tests;
