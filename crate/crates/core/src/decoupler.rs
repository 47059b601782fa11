//! Linear text/vision heads over the fused hidden state, the real-text head,
//! and the orthogonality loss.

use rand::Rng;

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoupler {
    pub text: Linear,
    pub vision: Linear,
    pub real_text: Linear,
    pub d_in: usize,
    pub hidden: usize,
}

/// One decoupled pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledState {
    pub h_text: Vec<f64>,
    pub h_vision: Vec<f64>,
    pub source_id: u64,
}

impl Decoupler {
    /// Xavier-uniform weights, zero biases, under the `decoupler.` prefix.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        Decoupler {
            text: Linear::new(store, "decoupler.text", d_in, hidden, true, rng),
            vision: Linear::new(store, "decoupler.vision", d_in, hidden, true, rng),
            real_text: Linear::new(store, "decoupler.real_text", d_in, hidden, true, rng),
            d_in,
            hidden,
        }
    }

    pub fn text_params(&self) -> Vec<ParamId> {
        self.text.params()
    }

    pub fn vision_params(&self) -> Vec<ParamId> {
        self.vision.params()
    }

    pub fn real_text_params(&self) -> Vec<ParamId> {
        self.real_text.params()
    }

    fn check(&self, g: &Graph, x: Var) -> Result<()> {
        match g.shape(x)[..] {
            [_, d] if d == self.d_in => Ok(()),
            ref s => Err(Error::shape(format!(
                "decoupler expects [B, {}] input, got {s:?}",
                self.d_in
            ))),
        }
    }

    /// `(h_text, h_vision)` for a `[B, D_in]` batch of fused states.
    pub fn decouple(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        self.check(g, x)?;
        Ok((self.text.forward(g, store, x)?, self.vision.forward(g, store, x)?))
    }

    pub fn encode_real_text(&self, g: &Graph, store: &ParamStore, e: Var) -> Result<Var> {
        self.check(g, e)?;
        self.real_text.forward(g, store, e)
    }

    /// Non-differentiable evaluation for a single fused vector.
    pub fn decouple_one(&self, store: &ParamStore, x: &[f64], source_id: u64) -> Result<DecoupledState> {
        let g = Graph::new();
        let xv = g.constant(&Tensor::new(vec![1, x.len()], x.to_vec())?)?;
        let (ht, hv) = self.decouple(&g, store, xv)?;
        Ok(DecoupledState {
            h_text: g.value(ht).into_data(),
            h_vision: g.value(hv).into_data(),
            source_id,
        })
    }
}

/// `‖H_labelᵀ H_gt‖_F²` for two `[B, H]` matrices.
pub fn ortho_loss(g: &Graph, h_label: Var, h_gt: Var) -> Result<Var> {
    let (a, b) = (g.shape(h_label), g.shape(h_gt));
    if a.len() != 2 || a != b || a[0] == 0 {
        return Err(Error::shape(format!("ortho_loss needs equal [B, H] inputs, got {a:?} and {b:?}")));
    }
    let m = g.matmul(g.transpose(h_label)?, h_gt)?;
    g.sum(g.square(m)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::grad_check;

    fn ortho(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let g = Graph::new();
        let va = g.constant(&Tensor::from_rows(a)).unwrap();
        let vb = g.constant(&Tensor::from_rows(b)).unwrap();
        g.scalar(ortho_loss(&g, va, vb).unwrap())
    }

    #[test]
    fn ortho_examples() {
        assert_eq!(ortho(&[vec![1.0], vec![1.0]], &[vec![1.0], vec![-1.0]]), 0.0);
        let i2 = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(ortho(&i2, &i2), 2.0);
        assert_eq!(ortho(&i2, &[vec![0.0; 2], vec![0.0; 2]]), 0.0);
    }

    #[test]
    fn ortho_zero_iff_orthogonal_columns() {
        let a = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0]];
        let b = vec![vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0], vec![2.0, -1.0, 3.0]];
        assert_eq!(ortho(&a, &b), 0.0);
        let mut c = b.clone();
        c[1][0] = 0.5;
        assert!(ortho(&a, &c) > 0.0);
    }

    #[test]
    fn ortho_shape_mismatch() {
        let g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(&Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(ortho_loss(&g, a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn ortho_grad_check() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[5, 3], 1.0, &mut r);
        let b = Tensor::randn(&[5, 3], 1.0, &mut r);
        let rep = grad_check("ortho", &[a, b], |g, v| ortho_loss(g, v[0], v[1]), 1e-4);
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn identity_and_constant_heads() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let d = Decoupler::new(&mut s, 3, 3, &mut r);
        s.get_mut(d.text.weight).data_mut().copy_from_slice(Tensor::identity(3).data());
        s.get_mut(d.vision.weight).data_mut().fill(0.0);
        s.get_mut(d.vision.bias.unwrap()).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let st = d.decouple_one(&s, &[0.3, 0.2, -7.0], 9).unwrap();
        assert_eq!(st.h_text, vec![0.3, 0.2, -7.0]);
        assert_eq!(st.h_vision, vec![0.5, -1.0, 2.0]);
        assert_eq!(st.source_id, 9);

        s.get_mut(d.real_text.weight).data_mut().copy_from_slice(Tensor::identity(3).data());
        let g = Graph::new();
        let e = g.constant(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0; 3]])).unwrap();
        let out = g.value(d.encode_real_text(&g, &s, e).unwrap());
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_naive_matmul() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        let d = Decoupler::new(&mut s, 6, 4, &mut r);
        let b = Tensor::randn(&[1, 4], 1.0, &mut r);
        s.get_mut(d.text.bias.unwrap()).data_mut().copy_from_slice(b.data());
        let x: Vec<f64> = Tensor::randn(&[6], 1.0, &mut r).into_data();
        let st = d.decouple_one(&s, &x, 0).unwrap();
        let w = s.get(d.text.weight);
        for j in 0..4 {
            let mut acc = b.data()[j];
            for i in 0..6 {
                acc += w.at(i, j) * x[i];
            }
            assert!((st.h_text[j] - acc).abs() < 1e-12);
        }
        let g = Graph::new();
        let bad = g.constant(&Tensor::zeros(&[1, 5])).unwrap();
        assert!(matches!(d.decouple(&g, &s, bad), Err(Error::Shape(_))));
    }
}
