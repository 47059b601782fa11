//! Small layer helpers shared by the model modules.

use rand::Rng;

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Affine map `x @ W + b` with `W: [fan_in, fan_out]`, `b: [1, fan_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::xavier(fan_in, fan_out, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out])));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Same as [`Linear::new`] but with an all-zero weight.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out])));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = g.matmul(x, g.param(store, self.weight)?)?;
        match self.bias {
            Some(b) => g.add(y, g.param(store, b)?),
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron `in -> hidden -> out` with a LeakyReLU in between.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub slope: f64,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        slope: f64,
        rng: &mut R,
    ) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.l1"), dims.0, dims.1, true, rng),
            l2: Linear::new(store, &format!("{name}.l2"), dims.1, dims.2, true, rng),
            slope,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.l1.params();
        p.extend(self.l2.params());
        p
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = g.leaky_relu(self.l1.forward(g, store, x)?, self.slope)?;
        self.l2.forward(g, store, h)
    }
}
