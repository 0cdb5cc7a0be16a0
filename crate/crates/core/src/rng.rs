//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived
//! from `(master seed, sample index, purpose)`, so results never depend on
//! the order in which samples are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GdaError, Result};
use crate::tensor::SampleTensor;

pub type StreamRng = ChaCha8Rng;

/// What a random stream is used for. Distinct purposes never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    ForwardNoise = 1,
    ReverseNoise = 2,
    Augment = 3,
    Negatives = 4,
    Data = 5,
    Shift = 6,
    Init = 7,
    Batches = 8,
    Calibration = 9,
}

const PURPOSES: u64 = 16;

/// Stream for `(master, index, purpose)`.
pub fn stream(master: u64, index: u64, purpose: Purpose) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index.wrapping_mul(PURPOSES).wrapping_add(purpose as u64));
    rng
}

/// I.i.d. standard normal tensor of the given shape.
pub fn sample_standard_normal(shape: &[usize], rng: &mut StreamRng) -> Result<SampleTensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(GdaError::InvalidParameter(format!("invalid shape {shape:?}")));
    }
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    SampleTensor::new(shape, data)
}
