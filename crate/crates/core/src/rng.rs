//! Counter-based noise streams.
//!
//! Every random draw in training and sampling is keyed by
//! `(master seed, iteration, purpose, index)`. A stream can be rebuilt from
//! its key alone, which is what makes checkpoint resume and chain replay
//! bit-exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diff::Tensor;

/// What a stream of random numbers is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Prior = 1,
    DecoderNoise = 2,
    EncoderNoise = 3,
    ClampedEncoder = 4,
    LabelDraw = 5,
    Batch = 6,
    Init = 7,
    Data = 8,
    Eval = 9,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a list of words into one 64-bit seed.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Noise streams for one iteration (or one sampling run) of a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    master: u64,
    iteration: u64,
    phase: u64,
}

impl Streams {
    pub fn new(master: u64, iteration: u64) -> Self {
        Self {
            master,
            iteration,
            phase: 0,
        }
    }

    /// An independent family of streams for the same iteration, e.g. for an
    /// extra discriminator update.
    pub fn phase(self, phase: u64) -> Self {
        Self { phase, ..self }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn rng(&self, purpose: Purpose, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(&[
            self.master,
            self.iteration,
            self.phase,
            purpose as u64,
            index,
        ]))
    }

    /// Standard normal tensor drawn from the `(purpose, index)` stream.
    pub fn normal(&self, purpose: Purpose, index: u64, shape: &[usize]) -> Tensor {
        normal_tensor(&mut self.rng(purpose, index), shape)
    }

    /// Uniform `[0, 1)` draws from the `(purpose, index)` stream.
    pub fn uniform(&self, purpose: Purpose, index: u64, n: usize) -> Vec<f64> {
        let mut rng = self.rng(purpose, index);
        (0..n).map(|_| rng.random::<f64>()).collect()
    }
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
