//! Seeded, splittable random streams.
//!
//! A single root seed drives every random draw. Independent consumers take
//! their own ChaCha stream, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::real::Real;
use crate::tensor::Tensor;

/// Stream identifiers.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 1 << 32;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRng {
    seed: u64,
}

impl SplitRng {
    pub fn new(seed: u64) -> Self {
        SplitRng { seed }
    }

    pub fn seed(self) -> u64 {
        self.seed
    }

    /// Independent generator for `(seed, stream id)`.
    pub fn stream(self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }

    /// Generator used to shuffle the given epoch.
    pub fn epoch_shuffle(self, epoch: u64) -> ChaCha8Rng {
        self.stream(stream::SHUFFLE + epoch)
    }
}

pub fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
    let dist = Normal::new(mean, std).expect("valid normal parameters");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

pub fn uniform_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new(-bound, bound).expect("valid uniform bounds");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}
