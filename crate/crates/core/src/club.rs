//! Variational conditional density `q(h_t | h_v)`, the contrastive log-ratio
//! upper bound, and the alternating fit schedule.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Optimizer, OptimizerConfig, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClubConfig {
    /// q-update interval in steps.
    pub k: usize,
    pub q_steps: usize,
    pub lambda: f64,
    pub lr: f64,
    pub hidden: usize,
    pub mixtures: usize,
}

impl Default for ClubConfig {
    fn default() -> Self {
        ClubConfig {
            k: 5,
            q_steps: 5,
            lambda: 0.1,
            lr: 1e-3,
            hidden: 64,
            mixtures: 1,
        }
    }
}

impl ClubConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("club.k must be >= 1".into()));
        }
        if self.mixtures == 0 || self.hidden == 0 {
            return Err(Error::Config("club.mixtures and club.hidden must be >= 1".into()));
        }
        if self.lambda < 0.0 || self.lr < 0.0 {
            return Err(Error::Config("club.lambda and club.lr must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Fit q for `q_steps` steps with the main model frozen, then take the
    /// main step.
    UpdateQ,
    UpdateMain,
}

pub fn alternate(cfg: &ClubConfig, global_step: u64) -> Phase {
    if global_step % cfg.k.max(1) as u64 == 0 {
        Phase::UpdateQ
    } else {
        Phase::UpdateMain
    }
}

/// Diagonal Gaussian (or Gaussian mixture) head conditioned on `h_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalQ {
    pub trunk: Linear,
    pub mu: Linear,
    pub logvar: Linear,
    pub mix: Option<Linear>,
    pub dim: usize,
    pub mixtures: usize,
    pub slope: f64,
}

/// Per-row `log N(x; mu, exp(logvar))`, `[B, 1]`. `logvar` is clamped.
pub fn diag_gaussian_log_prob(g: &Graph, x: Var, mu: Var, logvar: Var) -> Result<Var> {
    let lv = g.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)?;
    let d = g.sub(x, mu)?;
    let maha = g.mul(g.square(d)?, g.exp(g.neg(lv)?)?)?;
    let per = g.add_scalar(g.add(lv, maha)?, (2.0 * PI).ln())?;
    g.scale(g.sum_axis(per, 1)?, -0.5)
}

/// Log density of a mixture with `[B, M]` weight logits; `None` means equal
/// weights.
pub fn mixture_log_prob(g: &Graph, x: Var, mus: &[Var], logvars: &[Var], logits: Option<Var>) -> Result<Var> {
    if mus.is_empty() || mus.len() != logvars.len() {
        return Err(Error::contract("mixture needs matching, non-empty components"));
    }
    let comps = mus
        .iter()
        .zip(logvars)
        .map(|(&m, &lv)| diag_gaussian_log_prob(g, x, m, lv))
        .collect::<Result<Vec<_>>>()?;
    let lp = g.concat(&comps, 1)?;
    let b = g.shape(lp)[0];
    let log_w = match logits {
        Some(l) => {
            let norm = g.broadcast(g.logsumexp_rows(l)?, &[b, mus.len()])?;
            g.sub(l, norm)?
        }
        None => g.constant(&Tensor::full(&[b, mus.len()], -(mus.len() as f64).ln()))?,
    };
    g.logsumexp_rows(g.add(lp, log_w)?)
}

impl VariationalQ {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        mixtures: usize,
        rng: &mut R,
    ) -> Self {
        let out = mixtures * dim;
        VariationalQ {
            trunk: Linear::new(store, &format!("{name}.trunk"), dim, hidden, true, rng),
            mu: Linear::new(store, &format!("{name}.mu"), hidden, out, true, rng),
            logvar: Linear::new(store, &format!("{name}.logvar"), hidden, out, true, rng),
            mix: (mixtures > 1).then(|| Linear::new(store, &format!("{name}.mix"), hidden, mixtures, true, rng)),
            dim,
            mixtures,
            slope: 0.2,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.trunk.params();
        p.extend(self.mu.params());
        p.extend(self.logvar.params());
        if let Some(m) = &self.mix {
            p.extend(m.params());
        }
        p
    }

    /// `log q(h_t[i] | h_v[i])` per row, `[B, 1]`.
    pub fn log_prob(&self, g: &Graph, store: &ParamStore, h_t: Var, h_v: Var) -> Result<Var> {
        let (st, sv) = (g.shape(h_t), g.shape(h_v));
        if st.len() != 2 || st != sv || st[1] != self.dim {
            return Err(Error::shape(format!(
                "q expects two [B, {}] batches, got {st:?} and {sv:?}",
                self.dim
            )));
        }
        let z = g.leaky_relu(self.trunk.forward(g, store, h_v)?, self.slope)?;
        let mu = self.mu.forward(g, store, z)?;
        let lv = self.logvar.forward(g, store, z)?;
        if self.mixtures == 1 {
            return diag_gaussian_log_prob(g, h_t, mu, lv);
        }
        let d = self.dim;
        let split = |v: Var| -> Result<Vec<Var>> {
            (0..self.mixtures).map(|m| g.slice(v, 1, m * d, (m + 1) * d)).collect()
        };
        let logits = match &self.mix {
            Some(l) => Some(l.forward(g, store, z)?),
            None => None,
        };
        mixture_log_prob(g, h_t, &split(mu)?, &split(lv)?, logits)
    }
}

/// Rows `1..B` followed by row 0.
fn shift_rows(g: &Graph, x: Var) -> Result<Var> {
    let b = g.shape(x)[0];
    g.concat(&[g.slice(x, 0, 1, b)?, g.slice(x, 0, 0, 1)?], 0)
}

/// Positive-pair mean log density minus the mean over pairs `(h_t[i], h_v[i+1 mod B])`.
pub fn club_estimate(g: &Graph, store: &ParamStore, q: &VariationalQ, h_t: Var, h_v: Var) -> Result<Var> {
    let b = g.shape(h_t).first().copied().unwrap_or(0);
    if b < 2 {
        return Err(Error::contract(format!("club estimate needs B >= 2, got {b}")));
    }
    let pos = g.mean(q.log_prob(g, store, h_t, h_v)?)?;
    let neg = g.mean(q.log_prob(g, store, h_t, shift_rows(g, h_v)?)?)?;
    g.sub(pos, neg)
}

/// One maximum-likelihood step for `q` on detached features. Returns the
/// negative log-likelihood before the update.
pub fn fit_q_step(
    store: &mut ParamStore,
    q: &VariationalQ,
    opt: &mut Optimizer,
    h_t: &Tensor,
    h_v: &Tensor,
) -> Result<f64> {
    let g = Graph::new();
    let (t, v) = (g.constant(h_t)?, g.constant(h_v)?);
    let nll = g.neg(g.mean(q.log_prob(&g, store, t, v)?)?)?;
    let value = g.scalar(nll);
    let grads = g.backward(nll)?;
    for id in q.params() {
        if let Some(gr) = grads.param(id) {
            store.get_mut(id).accumulate_grad(&gr)?;
        }
    }
    opt.step(store)?;
    Ok(value)
}

/// CLUB value for the exact conditional of a unit-variance bivariate Gaussian.
pub fn analytic_club(rho: f64) -> f64 {
    rho * rho / (1.0 - rho * rho)
}

pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClubBenchRow {
    pub rho: f64,
    pub true_mi: f64,
    pub analytic_club: f64,
    pub estimate: f64,
    pub final_nll: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClubBenchConfig {
    pub samples: usize,
    pub fit_steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ClubBenchConfig {
    fn default() -> Self {
        ClubBenchConfig {
            samples: 10_000,
            fit_steps: 4000,
            batch: 256,
            optimizer: OptimizerConfig::adam(3e-3),
            seed: 0,
        }
    }
}

/// `n` pairs `(h_t, h_v)` with unit variances and correlation `rho`.
pub fn gaussian_pairs(rho: f64, n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        let y: f64 = r.sample(StandardNormal);
        let z: f64 = r.sample(StandardNormal);
        v.push(y);
        t.push(rho * y + (1.0 - rho * rho).sqrt() * z);
    }
    (
        Tensor::new(vec![n, 1], t).expect("n rows"),
        Tensor::new(vec![n, 1], v).expect("n rows"),
    )
}

/// Fits q on jointly Gaussian pairs and compares the estimate against the
/// true mutual information, accepting `[MI - 0.05, MI + 0.15]`.
pub fn club_bench_row(rho: f64, cfg: &ClubBenchConfig) -> Result<ClubBenchRow> {
    let (ht, hv) = gaussian_pairs(rho, cfg.samples, cfg.seed);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1B);
    let q = VariationalQ::new(&mut store, "q", 1, 64, 1, &mut rng);
    let mut opt = Optimizer::new(cfg.optimizer, q.params());
    let mut final_nll = f64::NAN;
    for _ in 0..cfg.fit_steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..cfg.samples)).collect();
        let pick = |t: &Tensor| Tensor::new(vec![idx.len(), 1], idx.iter().map(|&i| t.data()[i]).collect());
        final_nll = fit_q_step(&mut store, &q, &mut opt, &pick(&ht)?, &pick(&hv)?)?;
    }
    let g = Graph::new();
    let est = club_estimate(&g, &store, &q, g.constant(&ht)?, g.constant(&hv)?)?;
    let estimate = g.scalar(est);
    let true_mi = gaussian_mi(rho);
    Ok(ClubBenchRow {
        rho,
        true_mi,
        analytic_club: analytic_club(rho),
        estimate,
        final_nll,
        pass: estimate >= true_mi - 0.05 && estimate <= true_mi + 0.15,
    })
}
