use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seeded source for Glorot (Xavier) uniform weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlorotUniformInit {
    pub seed: u64,
}

impl GlorotUniformInit {
    pub fn new(seed: u64) -> Self {
        GlorotUniformInit { seed }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    pub fn limit(fan_in: usize, fan_out: usize) -> f64 {
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }
}

/// I.i.d. samples from `U[-limit, limit]`, `limit = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: rand::Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid(format!(
            "glorot_uniform needs positive fans, got fan_in={fan_in}, fan_out={fan_out}"
        )));
    }
    let limit = GlorotUniformInit::limit(fan_in, fan_out) as f32;
    let dist = Uniform::new_inclusive(-limit, limit)
        .map_err(|e| Error::invalid(format!("glorot bounds: {e}")))?;
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}
