//! Known text/visual factors and the linear mixing model that produces fused
//! hidden states from them.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, mix_seed, GenerationConfig, Scene};
use super::vocab::{check_tokens, VOCAB_SIZE};
use crate::error::{Error, Result};

const VIS_CHANNELS: usize = 4;
const STD_FLOOR: f64 = 1e-3;
const MAX_COND: f64 = 100.0;
const TOKEN_SALT: u64 = 0x7E47_0000;
const REFERENCE_SALT: u64 = 0x5EF0_0000_0000;
const MIX_SALT: u64 = 0x313C;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorConfig {
    /// Factor dimension `D`; the fused state has `2D` entries.
    pub dim: usize,
    /// Side of the pooling grid for the visual factor; `dim == 4 * grid^2`.
    pub grid: usize,
    pub sigma_noise: f64,
    /// Scenes used to estimate the visual standardisation statistics.
    pub reference_scenes: usize,
}

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig {
            dim: 64,
            grid: 4,
            sigma_noise: 0.01,
            reference_scenes: 512,
        }
    }
}

/// One fused vector with the factors that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedHiddenState {
    pub x_fused: Vec<f32>,
    pub e_text: Vec<f32>,
    pub e_vis: Vec<f32>,
    pub mixing_id: u64,
}

/// Per-dataset generative model: token vectors, visual whitening statistics
/// and the mixing matrix.
#[derive(Clone, Debug)]
pub struct FactorModel {
    cfg: FactorConfig,
    seed: u64,
    token_vectors: Vec<Vec<f64>>,
    vis_mean: Vec<f64>,
    vis_std: Vec<f64>,
    w_mix: DMatrix<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_vec(n, n, gaussian_vec(rng, n * n));
    a.qr().q()
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    max / min
}

impl FactorModel {
    pub fn new(seed: u64, cfg: &FactorConfig, gen: &GenerationConfig) -> Result<Self> {
        let d = cfg.dim;
        if d == 0 || d != VIS_CHANNELS * cfg.grid * cfg.grid {
            return Err(Error::Config(format!(
                "factor dim {d} must equal 4 * grid^2 (grid {})",
                cfg.grid
            )));
        }
        if gen.height % cfg.grid != 0 || gen.width % cfg.grid != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by grid {}",
                gen.height, gen.width, cfg.grid
            )));
        }
        if cfg.sigma_noise < 0.0 || !cfg.sigma_noise.is_finite() {
            return Err(Error::Config(format!("sigma_noise must be >= 0, got {}", cfg.sigma_noise)));
        }
        if cfg.reference_scenes < 2 {
            return Err(Error::Config("reference_scenes must be >= 2".into()));
        }

        let token_vectors = (0..VOCAB_SIZE as u64)
            .map(|t| gaussian_vec(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, TOKEN_SALT + t)), d))
            .collect();

        let mut model = FactorModel {
            cfg: cfg.clone(),
            seed,
            token_vectors,
            vis_mean: vec![0.0; d],
            vis_std: vec![1.0; d],
            w_mix: DMatrix::identity(2 * d, 2 * d),
        };

        let raw: Vec<Vec<f64>> = (0..cfg.reference_scenes as u64)
            .map(|i| generate_scene(mix_seed(seed, REFERENCE_SALT + i), gen).map(|s| model.raw_vis(&s)))
            .collect::<Result<_>>()?;
        let n = raw.len() as f64;
        for j in 0..d {
            let mean = raw.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = raw.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            model.vis_mean[j] = mean;
            model.vis_std[j] = var.sqrt().max(STD_FLOOR);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, MIX_SALT));
        let n2 = 2 * d;
        for _ in 0..100 {
            let u = random_orthogonal(&mut rng, n2);
            let v = random_orthogonal(&mut rng, n2);
            let s: Vec<f64> = (0..n2).map(|_| 10f64.powf(rng.random_range(0.0..1.0))).collect();
            let w = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s)) * v.transpose();
            if condition_number(&w) <= MAX_COND {
                model.w_mix = w;
                return Ok(model);
            }
        }
        Err(Error::Generation("could not draw a well-conditioned mixing matrix".into()))
    }

    pub fn config(&self) -> &FactorConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn mixing_id(&self) -> u64 {
        mix_seed(self.seed, MIX_SALT)
    }

    pub fn mixing_matrix(&self) -> &DMatrix<f64> {
        &self.w_mix
    }

    pub fn token_vector(&self, token: u16) -> &[f64] {
        &self.token_vectors[token as usize]
    }

    /// Mean of the label's token vectors.
    pub fn text_factor(&self, label: &[u16]) -> Result<Vec<f64>> {
        check_tokens(label)?;
        if label.is_empty() {
            return Err(Error::Vocabulary("empty label".into()));
        }
        let mut e = vec![0.0; self.cfg.dim];
        for &t in label {
            e.iter_mut().zip(&self.token_vectors[t as usize]).for_each(|(a, b)| *a += b);
        }
        e.iter_mut().for_each(|v| *v /= label.len() as f64);
        Ok(e)
    }

    /// Coverage and colour sums of the referred object per grid cell,
    /// normalised by cell area.
    fn raw_vis(&self, scene: &Scene) -> Vec<f64> {
        let g = self.cfg.grid;
        let (ch, cw) = (scene.height / g, scene.width / g);
        let area = (ch * cw) as f64;
        let mask = scene.target_mask();
        let mut out = vec![0.0; self.cfg.dim];
        for y in 0..scene.height {
            for x in 0..scene.width {
                let p = y * scene.width + x;
                if mask[p] == 0 {
                    continue;
                }
                let cell = (y / ch) * g + x / cw;
                let o = &mut out[cell * VIS_CHANNELS..(cell + 1) * VIS_CHANNELS];
                o[0] += 1.0;
                for c in 0..3 {
                    o[1 + c] += scene.image[p * 3 + c] as f64;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= area);
        out
    }

    /// Standardised pooled visual statistics of the referred object.
    pub fn visual_factor(&self, scene: &Scene) -> Result<Vec<f64>> {
        if scene.height % self.cfg.grid != 0 || scene.width % self.cfg.grid != 0 {
            return Err(Error::shape(format!(
                "scene {}x{} not divisible by grid {}",
                scene.height, scene.width, self.cfg.grid
            )));
        }
        Ok(self
            .raw_vis(scene)
            .iter()
            .zip(self.vis_mean.iter().zip(&self.vis_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    /// `W_mix @ [e_text; e_vis]` without noise.
    pub fn mix(&self, e_text: &[f64], e_vis: &[f64]) -> Vec<f64> {
        let z = nalgebra::DVector::from_iterator(
            2 * self.cfg.dim,
            e_text.iter().chain(e_vis).copied(),
        );
        (&self.w_mix * z).iter().copied().collect()
    }

    /// Fused state for `scene` with noise drawn from `seed`. Each noise entry is
    /// redrawn until it lies within three standard deviations.
    pub fn synthesize(&self, scene: &Scene, seed: u64, sigma_noise: f64) -> Result<FusedHiddenState> {
        if sigma_noise < 0.0 || !sigma_noise.is_finite() {
            return Err(Error::contract(format!("sigma_noise must be >= 0, got {sigma_noise}")));
        }
        let e_text = self.text_factor(&scene.label)?;
        let e_vis = self.visual_factor(scene)?;
        let mut x = self.mix(&e_text, &e_vis);
        if sigma_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, scene.seed));
            for v in x.iter_mut() {
                let z = loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= 3.0 {
                        break z;
                    }
                };
                *v += sigma_noise * z;
            }
        }
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
        Ok(FusedHiddenState {
            x_fused: f(&x),
            e_text: f(&e_text),
            e_vis: f(&e_vis),
            mixing_id: self.mixing_id(),
        })
    }
}
