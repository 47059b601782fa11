use rand::Rng;

use super::{DecoderPath, ImageEmbedding, MaskLogits, PromptSet, EMBED, HEADS, PATCH, PIXEL_FEATURES};
use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

/// Multi-head attention with separate query, key, value and output maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, heads: usize, rng: &mut R) -> Self {
        let mut lin = |s: &str| Linear::new(store, &format!("{name}.{s}"), EMBED, EMBED, true, rng);
        Attention {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
            heads,
        }
    }

    fn params(&self) -> Vec<ParamId> {
        [self.q, self.k, self.v, self.o].iter().flat_map(Linear::params).collect()
    }

    /// Queries `[B * tq, E]` attend over keys `[B * tk, E]` scene by scene.
    /// `key_in` feeds the key map and `value_in` the value map.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        query_in: Var,
        key_in: Var,
        value_in: Var,
        batch: usize,
        tq: usize,
        tk: usize,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, query_in)?;
        let k = self.k.forward(g, store, key_in)?;
        let v = self.v.forward(g, store, value_in)?;
        let d = EMBED / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut scenes = Vec::with_capacity(batch);
        for b in 0..batch {
            let (qb, kb, vb) = (
                g.slice(q, 0, b * tq, (b + 1) * tq)?,
                g.slice(k, 0, b * tk, (b + 1) * tk)?,
                g.slice(v, 0, b * tk, (b + 1) * tk)?,
            );
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (lo, hi) = (h * d, (h + 1) * d);
                let qh = g.slice(qb, 1, lo, hi)?;
                let kh = g.slice(kb, 1, lo, hi)?;
                let vh = g.slice(vb, 1, lo, hi)?;
                let scores = g.scale(g.matmul(qh, g.transpose(kh)?)?, scale)?;
                heads.push(g.matmul(g.softmax_rows(scores)?, vh)?);
            }
            scenes.push(g.concat(&heads, 1)?);
        }
        let out = g.concat(&scenes, 0)?;
        self.o.forward(g, store, out)
    }
}

/// Token self-attention, token-to-image cross-attention, token MLP; all
/// residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderBlock {
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

impl DecoderBlock {
    fn params(&self) -> Vec<ParamId> {
        let mut p = self.self_attn.params();
        p.extend(self.cross_attn.params());
        p.extend(self.mlp1.params());
        p.extend(self.mlp2.params());
        p
    }
}

/// One decoder path. Each path owns its parameters under its own prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDecoder {
    pub path: DecoderPath,
    pub pos: ParamId,
    pub mask_token: ParamId,
    /// 1-channel dense prompt to `E`, no bias, zero-initialised.
    pub dense_lift: Linear,
    pub blocks: Vec<DecoderBlock>,
    pub hyper1: Linear,
    pub hyper2: Linear,
    pub pixel_hyper: Linear,
    pub pixel: Linear,
    pub bias: ParamId,
    pub side: usize,
    pub slope: f64,
}

impl MaskDecoder {
    /// Decoder for a `side x side` patch grid.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: DecoderPath,
        side: usize,
        blocks: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let prefix = match path {
            DecoderPath::TextDecoder => "text_decoder",
            DecoderPath::VisualDecoder => "visual_decoder",
        };
        let name = |s: &str| format!("{prefix}.{s}");
        let pos = store.add(name("pos"), Tensor::randn(&[side * side, EMBED], 0.5, rng));
        let mask_token = store.add(name("mask_token"), Tensor::randn(&[1, EMBED], 0.5, rng));
        let dense_lift = Linear::zeros(store, &name("dense_lift"), 1, EMBED, false);
        let blocks = (0..blocks)
            .map(|i| DecoderBlock {
                self_attn: Attention::new(store, &name(&format!("block{i}.self_attn")), HEADS, rng),
                cross_attn: Attention::new(store, &name(&format!("block{i}.cross_attn")), HEADS, rng),
                mlp1: Linear::new(store, &name(&format!("block{i}.mlp1")), EMBED, 2 * EMBED, true, rng),
                mlp2: Linear::new(store, &name(&format!("block{i}.mlp2")), 2 * EMBED, EMBED, true, rng),
            })
            .collect();
        MaskDecoder {
            path,
            pos,
            mask_token,
            dense_lift,
            blocks,
            hyper1: Linear::new(store, &name("hyper1"), EMBED, EMBED, true, rng),
            hyper2: Linear::new(store, &name("hyper2"), EMBED, EMBED, true, rng),
            pixel_hyper: Linear::new(store, &name("pixel_hyper"), EMBED, PIXEL_FEATURES, true, rng),
            pixel: Linear::new(store, &name("pixel"), 3, PIXEL_FEATURES, true, rng),
            bias: store.add(name("bias"), Tensor::zeros(&[1, 1])),
            side,
            slope,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.pos, self.mask_token];
        p.extend(self.dense_lift.params());
        for b in &self.blocks {
            p.extend(b.params());
        }
        for l in [self.hyper1, self.hyper2, self.pixel_hyper, self.pixel] {
            p.extend(l.params());
        }
        p.push(self.bias);
        p
    }

    /// Parameters whose zeroing makes every logit exactly 0.
    pub fn output_head(&self) -> Vec<ParamId> {
        let mut p = self.hyper2.params();
        p.extend(self.pixel_hyper.params());
        p.push(self.bias);
        p
    }

    /// Average-pools a `[B, H * W]` dense prompt to `[B * G * G, 1]`.
    fn pool_dense(&self, dense: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        let (gs, cell) = (self.side, (PATCH * PATCH) as f64);
        let mut out = vec![0.0; dense.rows() * gs * gs];
        for (b, row) in dense.data().chunks(height * width).enumerate() {
            for y in 0..height {
                for x in 0..width {
                    out[b * gs * gs + (y / PATCH) * gs + x / PATCH] += row[y * width + x] / cell;
                }
            }
        }
        Tensor::new(vec![dense.rows() * gs * gs, 1], out)
    }

    pub fn decode(&self, g: &Graph, store: &ParamStore, emb: &ImageEmbedding, prompts: &PromptSet) -> Result<MaskLogits> {
        let batch = emb.batch();
        let (gg, pix) = (self.side * self.side, emb.height * emb.width);
        if emb.side != self.side || g.shape(emb.grid) != [batch * gg, EMBED] {
            return Err(Error::shape(format!(
                "decoder for a {0}x{0} grid got embedding {1:?}",
                self.side,
                g.shape(emb.grid)
            )));
        }
        prompts.validate(g, batch, pix)?;

        let mut src = emb.grid;
        if let Some(d) = &prompts.dense {
            let pooled = g.constant(&self.pool_dense(d, emb.height, emb.width)?)?;
            src = g.add(src, self.dense_lift.forward(g, store, pooled)?)?;
        }
        let pos = g.reshape(g.param(store, self.pos)?, &[1, gg * EMBED])?;
        let keys = g.reshape(g.add(g.reshape(src, &[batch, gg * EMBED])?, pos)?, &[batch * gg, EMBED])?;

        let mt = g.param(store, self.mask_token)?;
        let per = prompts.sparse.map_or(0, |_| prompts.per_scene);
        let t = 1 + per;
        let mut parts = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            parts.push(mt);
            if let Some(s) = prompts.sparse {
                parts.push(g.slice(s, 0, b * per, (b + 1) * per)?);
            }
        }
        let mut tokens = g.concat(&parts, 0)?;

        for blk in &self.blocks {
            let sa = blk.self_attn.forward(g, store, tokens, tokens, tokens, batch, t, t)?;
            tokens = g.add(tokens, sa)?;
            let ca = blk.cross_attn.forward(g, store, tokens, keys, src, batch, t, gg)?;
            tokens = g.add(tokens, ca)?;
            let h = g.leaky_relu(blk.mlp1.forward(g, store, tokens)?, self.slope)?;
            tokens = g.add(tokens, blk.mlp2.forward(g, store, h)?)?;
        }
        let mask_token = g.slice(g.reshape(tokens, &[batch, t * EMBED])?, 1, 0, EMBED)?;

        let tc = self
            .hyper2
            .forward(g, store, g.leaky_relu(self.hyper1.forward(g, store, mask_token)?, self.slope)?)?;
        let tp = self.pixel_hyper.forward(g, store, mask_token)?;
        let pf = g.leaky_relu(self.pixel.forward(g, store, emb.pixels)?, self.slope)?;

        let mut rows = Vec::with_capacity(batch);
        for b in 0..batch {
            let kb = g.slice(keys, 0, b * gg, (b + 1) * gg)?;
            let coarse = g.matmul(kb, g.transpose(g.slice(tc, 0, b, b + 1)?)?)?;
            let coarse = g.reshape(coarse, &[self.side, self.side])?;
            let up = g.reshape(g.upsample_bilinear(coarse, emb.height, emb.width)?, &[1, pix])?;
            let pb = g.slice(pf, 0, b * pix, (b + 1) * pix)?;
            let fine = g.reshape(g.matmul(pb, g.transpose(g.slice(tp, 0, b, b + 1)?)?)?, &[1, pix])?;
            rows.push(g.add(up, fine)?);
        }
        let logits = g.add(g.concat(&rows, 0)?, g.param(store, self.bias)?)?;
        Ok(MaskLogits {
            logits,
            mask_token,
            path: self.path,
        })
    }
}
