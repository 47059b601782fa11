//! Toy promptable segmenter: patch encoder, sparse and dense prompts, two
//! mask decoder paths and self-feedback reprompting.

mod decoder;

pub use decoder::{Attention, DecoderBlock, MaskDecoder};

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::synthdata::vocab::VOCAB_SIZE;

pub const PATCH: usize = 8;
pub const EMBED: usize = 64;
pub const POINTS: usize = 4;
pub const HEADS: usize = 2;
pub const BLOCKS: usize = 2;
pub const PIXEL_FEATURES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderPath {
    TextDecoder,
    VisualDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTag {
    DecoupledText,
    DecoupledVisual,
    PseudoPoint,
}

/// A batch of images in HWC layout, values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u64>,
    /// `[B, H * W * 3]`.
    pub pixels: Vec<f64>,
}

impl ImageBatch {
    pub fn new(height: usize, width: usize) -> Self {
        ImageBatch {
            height,
            width,
            ids: Vec::new(),
            pixels: Vec::new(),
        }
    }

    pub fn push(&mut self, id: u64, image: &[f32]) -> Result<()> {
        if image.len() != self.height * self.width * 3 {
            return Err(Error::shape(format!(
                "image of {} values for a {}x{}x3 batch",
                image.len(),
                self.height,
                self.width
            )));
        }
        self.ids.push(id);
        self.pixels.extend(image.iter().map(|&v| v as f64));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn image_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Patch grid for a batch: `grid` is `[B * G * G, E]`, `pixels` is
/// `[B * H * W, 3]`.
#[derive(Clone, Debug)]
pub struct ImageEmbedding {
    pub grid: Var,
    pub pixels: Var,
    pub side: usize,
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u64>,
}

impl ImageEmbedding {
    pub fn batch(&self) -> usize {
        self.ids.len()
    }
}

/// Patchify, then `linear -> LeakyReLU -> linear`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageEncoder {
    pub l1: Linear,
    pub l2: Linear,
    pub slope: f64,
}

/// `[B * G * G, PATCH * PATCH * 3]` patches, each flattened row-major over
/// `(dy, dx, channel)`.
pub fn patchify(batch: &ImageBatch) -> Result<Tensor> {
    let (h, w) = (batch.height, batch.width);
    if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 || h != w {
        return Err(Error::shape(format!(
            "image {h}x{w} is not a square multiple of the patch size {PATCH}"
        )));
    }
    let g = h / PATCH;
    let plen = PATCH * PATCH * 3;
    let mut out = Vec::with_capacity(batch.len() * g * g * plen);
    for img in batch.pixels.chunks(h * w * 3) {
        for py in 0..g {
            for px in 0..g {
                for dy in 0..PATCH {
                    let row = (py * PATCH + dy) * w + px * PATCH;
                    out.extend_from_slice(&img[row * 3..(row + PATCH) * 3]);
                }
            }
        }
    }
    Tensor::new(vec![batch.len() * g * g, plen], out)
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, slope: f64, rng: &mut R) -> Self {
        ImageEncoder {
            l1: Linear::new(store, "encoder.l1", PATCH * PATCH * 3, EMBED, true, rng),
            l2: Linear::new(store, "encoder.l2", EMBED, EMBED, true, rng),
            slope,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.l1.params();
        p.extend(self.l2.params());
        p
    }

    pub fn encode(&self, g: &Graph, store: &ParamStore, batch: &ImageBatch) -> Result<ImageEmbedding> {
        let patches = g.constant(&patchify(batch)?)?;
        let hidden = g.leaky_relu(self.l1.forward(g, store, patches)?, self.slope)?;
        let grid = self.l2.forward(g, store, hidden)?;
        let pixels = g.constant(&Tensor::new(
            vec![batch.len() * batch.image_pixels(), 3],
            batch.pixels.clone(),
        )?)?;
        Ok(ImageEmbedding {
            grid,
            pixels,
            side: batch.height / PATCH,
            height: batch.height,
            width: batch.width,
            ids: batch.ids.clone(),
        })
    }
}

/// Sparse tokens `[B * per_scene, E]` with one tag per token slot, plus an
/// optional dense mask `[B, H * W]` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub sparse: Option<Var>,
    pub per_scene: usize,
    pub tags: Vec<PromptTag>,
    pub dense: Option<Tensor>,
}

impl PromptSet {
    pub fn sparse(g: &Graph, tokens: Var, per_scene: usize, tag: PromptTag) -> Result<Self> {
        let s = g.shape(tokens);
        if s.len() != 2 || s[1] != EMBED || per_scene == 0 || s[0] % per_scene != 0 {
            return Err(Error::shape(format!(
                "sparse prompts must be [B * {per_scene}, {EMBED}], got {s:?}"
            )));
        }
        Ok(PromptSet {
            sparse: Some(tokens),
            per_scene,
            tags: vec![tag; per_scene],
            dense: None,
        })
    }

    pub fn with_dense(mut self, dense: Option<Tensor>) -> Self {
        self.dense = dense;
        self
    }

    pub fn validate(&self, g: &Graph, batch: usize, pixels: usize) -> Result<()> {
        if self.sparse.is_none() && self.dense.is_none() {
            return Err(Error::contract("prompt set needs a sparse token or a dense prompt"));
        }
        if let Some(s) = self.sparse {
            if g.shape(s) != [batch * self.per_scene, EMBED] || self.tags.len() != self.per_scene {
                return Err(Error::shape(format!(
                    "sparse prompts {:?} with {} tags do not match batch {batch}",
                    g.shape(s),
                    self.tags.len()
                )));
            }
        }
        if let Some(d) = &self.dense {
            if d.shape() != [batch, pixels] {
                return Err(Error::shape(format!("dense prompt {:?} for batch {batch}", d.shape())));
            }
            if d.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract("dense prompt values must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Label-to-point conversion: mean token row of `table`, the real-text head,
/// then a linear map to `POINTS` tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextPrompter {
    pub table: ParamId,
    pub point_map: Linear,
    pub vocab: usize,
    pub d_in: usize,
}

/// Linear map from a decoupled feature to `POINTS` sparse tokens.
pub fn point_map(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut impl Rng) -> Linear {
    Linear::new(store, name, hidden, POINTS * EMBED, true, rng)
}

impl TextPrompter {
    /// Unit-variance Gaussian token table under `text.table`, point map under
    /// `text.point_map`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let table = store.add("text.table", Tensor::randn(&[VOCAB_SIZE, d_in], 1.0, rng));
        let point_map = Linear::new(store, "text.point_map", hidden, POINTS * EMBED, true, rng);
        TextPrompter {
            table,
            point_map,
            vocab: VOCAB_SIZE,
            d_in,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.table];
        p.extend(self.point_map.params());
        p
    }

    /// Mean token embedding per label, `[B, D_in]`.
    pub fn label_embedding(&self, g: &Graph, store: &ParamStore, labels: &[&[u16]]) -> Result<Var> {
        let mut bow = vec![0.0; labels.len() * self.vocab];
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::Vocabulary("empty label".into()));
            }
            for &t in label.iter() {
                if t as usize >= self.vocab {
                    return Err(Error::Vocabulary(format!("token id {t} outside vocabulary of {}", self.vocab)));
                }
                bow[i * self.vocab + t as usize] += 1.0 / label.len() as f64;
            }
        }
        let bow = g.constant(&Tensor::new(vec![labels.len(), self.vocab], bow)?)?;
        g.matmul(bow, g.param(store, self.table)?)
    }

    /// Tokens for a `[B, H]` feature batch.
    pub fn points(&self, g: &Graph, store: &ParamStore, h: Var, tag: PromptTag) -> Result<PromptSet> {
        points_from(g, store, &self.point_map, h, tag)
    }

    /// Full conversion of real labels through `real_text`.
    pub fn text_to_points(
        &self,
        g: &Graph,
        store: &ParamStore,
        real_text: &Linear,
        labels: &[&[u16]],
    ) -> Result<(PromptSet, Var)> {
        let e = self.label_embedding(g, store, labels)?;
        let h = real_text.forward(g, store, e)?;
        Ok((self.points(g, store, h, PromptTag::PseudoPoint)?, h))
    }
}

/// `[B, H] -> [B * POINTS, E]` through `map`.
pub fn points_from(g: &Graph, store: &ParamStore, map: &Linear, h: Var, tag: PromptTag) -> Result<PromptSet> {
    let b = g.shape(h)[0];
    let flat = map.forward(g, store, h)?;
    let tokens = g.reshape(flat, &[b * POINTS, EMBED])?;
    PromptSet::sparse(g, tokens, POINTS, tag)
}

/// Decoder output: logits `[B, H * W]` and the final mask-token embedding
/// `[B, E]`.
#[derive(Clone, Copy, Debug)]
pub struct MaskLogits {
    pub logits: Var,
    pub mask_token: Var,
    pub path: DecoderPath,
}

/// Detached soft (or hard at 0.5) dense prompt from logits.
pub fn dense_from_logits(g: &Graph, logits: Var, hard: bool) -> Tensor {
    let mut t = g.value(logits);
    for v in t.data_mut() {
        let p = sigmoid(*v);
        *v = if hard { (p > 0.5) as u8 as f64 } else { p };
    }
    t
}

/// `M_0 = decode(prompts without dense)`, then `iterations` rounds of
/// decoding with the previous mask as the dense prompt.
pub fn self_feedback_refine(
    g: &Graph,
    store: &ParamStore,
    decoder: &MaskDecoder,
    emb: &ImageEmbedding,
    prompts: &PromptSet,
    iterations: usize,
    hard: bool,
) -> Result<MaskLogits> {
    let base = prompts.clone().with_dense(None);
    let mut out = decoder.decode(g, store, emb, &base)?;
    for _ in 0..iterations {
        let dense = dense_from_logits(g, out.logits, hard);
        out = decoder.decode(g, store, emb, &base.clone().with_dense(Some(dense)))?;
    }
    Ok(out)
}

/// Binary PGM (P5, maxval 255) of probabilities in `[0, 1]`.
pub fn write_pgm(path: &Path, height: usize, width: usize, probs: &[f64]) -> Result<()> {
    if probs.len() != height * width {
        return Err(Error::shape(format!("{} values for a {height}x{width} mask", probs.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(probs.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
