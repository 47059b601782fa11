use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{self, Motion, ObjectAttrs, ShapeKind, SizeClass, COLORS};
use crate::error::{Error, Result};

/// Minimum number of visible pixels every object must keep after occlusion.
pub const MIN_VISIBLE: usize = 16;
const FAST_ROW_DIM: f32 = 0.55;
const MIN_SEPARATION: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_retries: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 4,
            max_retries: 64,
        }
    }
}

impl GenerationConfig {
    pub fn with_objects(n: usize) -> Self {
        GenerationConfig {
            min_objects: n,
            max_objects: n,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 1 || self.max_objects > 4 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range {}..={} must lie within 1..=4",
                self.min_objects, self.max_objects
            )));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "image side must be >= 32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("max_retries must be >= 1".into()));
        }
        Ok(())
    }
}

/// One synthetic frame with its objects, masks and referring expression.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<ObjectAttrs>,
    /// `height * width * 3`, row-major HWC, values in [0, 1].
    pub image: Vec<f32>,
    /// Visible (post-occlusion) mask per object, 0/1 bytes.
    pub gt_masks: Vec<Vec<u8>>,
    pub target: usize,
    pub label: Vec<u16>,
    pub label_mask: Vec<u8>,
}

impl Scene {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Ground-truth mask of the referred object.
    pub fn target_mask(&self) -> &[u8] {
        &self.gt_masks[self.target]
    }

    pub fn label_text(&self) -> String {
        vocab::render_label(&self.label).unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    attrs: ObjectAttrs,
    cx: f64,
    cy: f64,
    r: f64,
}

impl Placed {
    fn covers(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let r = self.r;
        match self.attrs.shape {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => dy <= 0.5 * r && dy >= -r + dx.abs() * 3f64.sqrt(),
        }
    }
}

fn sample_attrs(rng: &mut ChaCha8Rng) -> ObjectAttrs {
    ObjectAttrs {
        shape: ShapeKind::ALL[rng.random_range(0..3)],
        color: rng.random_range(0..COLORS.len() as u8),
        size: SizeClass::ALL[rng.random_range(0..2)],
        motion: Motion::ALL[rng.random_range(0..2)],
    }
}

fn try_layout(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Option<Vec<Placed>> {
    let scale = h.min(w) as f64 / 64.0;
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    for _ in 0..n {
        let attrs = sample_attrs(rng);
        let r = scale
            * match attrs.size {
                SizeClass::Small => rng.random_range(5.0..=7.0),
                SizeClass::Large => rng.random_range(10.0..=13.0),
            };
        let mut ok = None;
        for _ in 0..32 {
            let cx = rng.random_range(r..=w as f64 - r);
            let cy = rng.random_range(r..=h as f64 - r);
            let clear = placed.iter().all(|p| {
                let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
                d >= MIN_SEPARATION * (p.r + r)
            });
            if clear {
                ok = Some(Placed { attrs, cx, cy, r });
                break;
            }
        }
        placed.push(ok?);
    }
    Some(placed)
}

/// Deterministic scene generation from `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &GenerationConfig) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_retries {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let Some(placed) = try_layout(&mut rng, n, h, w) else {
            continue;
        };
        let objects: Vec<ObjectAttrs> = placed.iter().map(|p| p.attrs).collect();
        let target = rng.random_range(0..n);
        let Some(label) = vocab::minimal_label(&objects, target) else {
            continue;
        };

        // owner[p] = index of the topmost object covering pixel p
        let mut owner = vec![u8::MAX; h * w];
        for (i, p) in placed.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if p.covers(x as f64 + 0.5, y as f64 + 0.5) {
                        owner[y * w + x] = i as u8;
                    }
                }
            }
        }
        let gt_masks: Vec<Vec<u8>> = (0..n)
            .map(|i| owner.iter().map(|&o| (o as usize == i) as u8).collect())
            .collect();
        if gt_masks
            .iter()
            .any(|m| m.iter().map(|&v| v as usize).sum::<usize>() < MIN_VISIBLE)
        {
            continue;
        }

        let mut image = vec![0f32; h * w * 3];
        for (pix, &o) in owner.iter().enumerate() {
            if o == u8::MAX {
                continue;
            }
            let a = &objects[o as usize];
            let dim = if a.motion == Motion::Fast && (pix / w) % 2 == 1 {
                FAST_ROW_DIM
            } else {
                1.0
            };
            for c in 0..3 {
                image[pix * 3 + c] = COLORS[a.color as usize].1[c] * dim;
            }
        }
        let label_mask = objects
            .iter()
            .zip(&gt_masks)
            .filter(|(o, _)| vocab::matches(o, &label))
            .fold(vec![0u8; h * w], |mut acc, (_, m)| {
                acc.iter_mut().zip(m).for_each(|(a, b)| *a |= b);
                acc
            });
        return Ok(Scene {
            seed,
            height: h,
            width: w,
            objects,
            image,
            gt_masks,
            target,
            label,
            label_mask,
        });
    }
    Err(Error::Generation(format!(
        "no valid scene for seed {seed} after {} attempts",
        cfg.max_retries
    )))
}

/// SplitMix64 finaliser used to derive independent per-item seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
