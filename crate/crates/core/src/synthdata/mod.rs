//! Synthetic scenes, fused hidden states with known factors, and the dataset
//! file format.

mod factors;
mod format;
mod scene;
pub mod vocab;

pub use factors::{condition_number, FactorConfig, FactorModel, FusedHiddenState};
pub use format::{Dataset, Sample, MAGIC, VERSION};
pub use scene::{generate_scene, mix_seed, GenerationConfig, Scene, MIN_VISIBLE};

use rayon::prelude::*;

use crate::error::Result;

const NOISE_SALT: u64 = 0x4015E;

/// Generates `count` scenes and their fused states. Scene `i` uses seed
/// `mix_seed(seed, i)`; the result does not depend on thread count.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    gen: &GenerationConfig,
    factors: &FactorConfig,
) -> Result<(Dataset, FactorModel)> {
    gen.validate()?;
    let model = FactorModel::new(seed, factors, gen)?;
    let noise_seed = mix_seed(seed, NOISE_SALT);
    let samples = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let scene = generate_scene(mix_seed(seed, i), gen)?;
            let state = model.synthesize(&scene, noise_seed, factors.sigma_noise)?;
            Ok(Sample { scene, state })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Dataset {
            height: gen.height,
            width: gen.width,
            dim: factors.dim,
            samples,
        },
        model,
    ))
}

#[cfg(test)]
mod tests;
