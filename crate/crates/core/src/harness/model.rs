use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::adversary::{Discriminator, Role};
use crate::club::VariationalQ;
use crate::decoupler::Decoupler;
use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::FusionGate;
use crate::nn::Linear;
use crate::segcore::{
    point_map, points_from, self_feedback_refine, DecoderPath, ImageBatch, ImageEmbedding, ImageEncoder, MaskDecoder,
    MaskLogits, PromptSet, PromptTag, TextPrompter, PATCH,
};
use crate::synthdata::{mix_seed, Sample};

const INIT_SALT: u64 = 0x1A17;

/// Every trainable component, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: ImageEncoder,
    pub prompter: TextPrompter,
    pub decoupler: Decoupler,
    pub visual_map: Linear,
    pub text_decoder: MaskDecoder,
    pub visual_decoder: MaskDecoder,
    pub gate: FusionGate,
    pub d_text: Discriminator,
    pub d_vision: Discriminator,
    pub q: VariationalQ,
    pub height: usize,
    pub width: usize,
}

/// Both branches for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Branches {
    pub h_text: Var,
    pub h_vision: Var,
    pub text: MaskLogits,
    pub visual: MaskLogits,
}

impl Model {
    /// Fresh parameters for factor dimension `dim` (fused width `2 * dim`).
    pub fn new(cfg: &RunConfig, dim: usize) -> Result<Self> {
        let (height, width) = (cfg.data.generation.height, cfg.data.generation.width);
        let m = &cfg.model;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.run.seed, INIT_SALT));
        let mut store = ParamStore::new();
        let side = height / PATCH;
        let d_in = 2 * dim;
        let encoder = ImageEncoder::new(&mut store, m.slope, &mut rng);
        let prompter = TextPrompter::new(&mut store, d_in, m.hidden, &mut rng);
        let decoupler = Decoupler::new(&mut store, d_in, m.hidden, &mut rng);
        let visual_map = point_map(&mut store, "visual.point_map", m.hidden, &mut rng);
        let text_decoder = MaskDecoder::new(&mut store, DecoderPath::TextDecoder, side, m.blocks, m.slope, &mut rng);
        let visual_decoder =
            MaskDecoder::new(&mut store, DecoderPath::VisualDecoder, side, m.blocks, m.slope, &mut rng);
        let gate = FusionGate::new(&mut store, m.gate, m.fixed_gate)?;
        let d_text = Discriminator::new(&mut store, Role::Text, m.hidden, m.slope, &mut rng);
        let d_vision = Discriminator::new(&mut store, Role::Vision, m.hidden, m.slope, &mut rng);
        let c = &cfg.club;
        let q = VariationalQ::new(&mut store, "club.q", m.hidden, c.hidden, c.mixtures, &mut rng);
        Ok(Model {
            store,
            encoder,
            prompter,
            decoupler,
            visual_map,
            text_decoder,
            visual_decoder,
            gate,
            d_text,
            d_vision,
            q,
            height,
            width,
        })
    }

    /// Parameters frozen during phase 2: the text decoder and everything that
    /// turns a label into its prompts.
    pub fn text_side_params(&self) -> Vec<ParamId> {
        let mut p = self.text_decoder.params();
        p.extend(self.prompter.params());
        p.extend(self.decoupler.real_text_params());
        p
    }

    pub fn text_decoder_checksum(&self) -> u32 {
        self.store.checksum(&self.text_decoder.params())
    }

    pub fn phase1_params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        p.extend(self.text_side_params());
        p
    }

    pub fn phase2_params(&self, freeze_image_encoder: bool) -> Vec<ParamId> {
        let mut p = if freeze_image_encoder { vec![] } else { self.encoder.params() };
        p.extend(self.decoupler.text_params());
        p.extend(self.decoupler.vision_params());
        p.extend(self.visual_map.params());
        p.extend(self.visual_decoder.params());
        p.extend(self.gate.params());
        p
    }

    pub fn disc_params(&self) -> Vec<ParamId> {
        let mut p = self.d_text.params();
        p.extend(self.d_vision.params());
        p
    }

    /// Marks exactly `ids` as trainable.
    pub fn train_only(&mut self, ids: &[ParamId]) {
        let all: Vec<ParamId> = self.store.ids().collect();
        self.store.set_trainable(&all, false);
        self.store.set_trainable(ids, true);
    }

    pub fn image_batch(&self, samples: &[&Sample]) -> Result<ImageBatch> {
        let mut b = ImageBatch::new(self.height, self.width);
        for s in samples {
            b.push(s.scene.seed, &s.scene.image)?;
        }
        Ok(b)
    }

    pub fn encode(&self, g: &Graph, samples: &[&Sample]) -> Result<ImageEmbedding> {
        if samples.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        self.encoder.encode(g, &self.store, &self.image_batch(samples)?)
    }

    /// Text path driven by the real labels.
    pub fn real_text_path(
        &self,
        g: &Graph,
        emb: &ImageEmbedding,
        samples: &[&Sample],
        iterations: usize,
        hard: bool,
    ) -> Result<MaskLogits> {
        let labels: Vec<&[u16]> = samples.iter().map(|s| s.scene.label.as_slice()).collect();
        let (prompts, _) = self
            .prompter
            .text_to_points(g, &self.store, &self.decoupler.real_text, &labels)?;
        self_feedback_refine(g, &self.store, &self.text_decoder, emb, &prompts, iterations, hard)
    }

    /// Decoupled text and visual paths from the fused states.
    pub fn branches(
        &self,
        g: &Graph,
        emb: &ImageEmbedding,
        x: Var,
        iterations: usize,
        hard: bool,
    ) -> Result<Branches> {
        let (h_text, h_vision) = self.decoupler.decouple(g, &self.store, x)?;
        let tp: PromptSet = self.prompter.points(g, &self.store, h_text, PromptTag::DecoupledText)?;
        let vp = points_from(g, &self.store, &self.visual_map, h_vision, PromptTag::DecoupledVisual)?;
        let text = self_feedback_refine(g, &self.store, &self.text_decoder, emb, &tp, iterations, hard)?;
        let visual = self_feedback_refine(g, &self.store, &self.visual_decoder, emb, &vp, iterations, hard)?;
        Ok(Branches {
            h_text,
            h_vision,
            text,
            visual,
        })
    }
}

/// `[B, 2D]` fused states.
pub fn fused_states(samples: &[&Sample]) -> Result<Tensor> {
    let d = samples.first().map_or(0, |s| s.state.x_fused.len());
    let data = samples
        .iter()
        .flat_map(|s| s.state.x_fused.iter().map(|&v| v as f64))
        .collect();
    Tensor::new(vec![samples.len(), d], data)
}

/// `[B, H * W]` 0/1 masks.
pub fn mask_tensor<'a>(masks: impl ExactSizeIterator<Item = &'a [u8]>, pixels: usize) -> Result<Tensor> {
    let n = masks.len();
    let data = masks.flat_map(|m| m.iter().map(|&v| v as f64)).collect();
    Tensor::new(vec![n, pixels], data)
}

pub fn factor_rows(samples: &[&Sample], text: bool) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let f = if text { &s.state.e_text } else { &s.state.e_vis };
            f.iter().map(|&v| v as f64).collect()
        })
        .collect()
}
