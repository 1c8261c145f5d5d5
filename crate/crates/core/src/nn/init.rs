use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Shape, Tensor};

pub type Rng = rand_chacha::ChaCha8Rng;

/// Parameter initializer. `zeros()` skips sampling, which is all profiling needs.
pub struct Initializer {
    rng: Option<Rng>,
}

impl Initializer {
    pub fn seeded(seed: u64) -> Self {
        Initializer {
            rng: Some(Rng::seed_from_u64(seed)),
        }
    }

    pub fn zeros() -> Self {
        Initializer { rng: None }
    }

    pub fn normal<T: Scalar>(&mut self, shape: Shape, std: f64) -> Tensor<T> {
        match &mut self.rng {
            None => Tensor::zeros(shape),
            Some(rng) => {
                let dist = Normal::new(0.0, std).expect("finite standard deviation");
                let data = (0..shape.numel()).map(|_| T::of(dist.sample(rng))).collect();
                Tensor::from_vec(shape, data).expect("length matches shape")
            }
        }
    }

    /// He-normal weights: std = gain / sqrt(fan_in).
    pub fn kaiming<T: Scalar>(&mut self, shape: Shape, fan_in: usize, gain: f64) -> Tensor<T> {
        self.normal(shape, gain / (fan_in.max(1) as f64).sqrt())
    }
}
