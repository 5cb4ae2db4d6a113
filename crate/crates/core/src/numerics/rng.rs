//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 keystream. The 256-bit key is the SplitMix64
//! expansion of `master_seed`; the 64-bit ChaCha stream word is `stream_id`.
//! Distinct `(master_seed, stream_id)` pairs therefore address independent,
//! counter-indexed sequences, and no sample depends on the order in which
//! streams are consumed.
//!
//! Gaussian samples use the Box–Muller transform on pairs of 53-bit uniforms:
//! `z0 = sqrt(-2 ln u1) cos(2 pi u2)`, `z1 = sqrt(-2 ln u1) sin(2 pi u2)`,
//! with `u1` in (0, 1] and `u2` in [0, 1), emitted in that order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::Tensor;
use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of integers into a single stream id.
pub fn derive_stream_id(parts: &[u64]) -> u64 {
    let mut state = 0x5eed_0fad_a5a5_u64;
    let mut acc = 0u64;
    for &p in parts {
        state ^= p;
        acc = splitmix64(&mut state) ^ acc.rotate_left(17);
    }
    acc
}

/// A seeded, addressable random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut state = master_seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            inner,
            spare_normal: None,
        }
    }

    /// Stream whose id is derived from several components (e.g. path, trial, instance).
    pub fn derived(master_seed: u64, parts: &[u64]) -> Self {
        Self::new(master_seed, derive_stream_id(parts))
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; the bias is below 2^-64 * n, irrelevant here.
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * theta.sin());
        radius * theta.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Tensor of i.i.d. `Normal(mean, std)` samples.
pub fn gaussian(shape: &[usize], mean: f64, std: f64, rng: &mut RngStream) -> Result<Tensor> {
    if !(std.is_finite() && std >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gaussian std must be finite and >= 0, got {std}"
        )));
    }
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![mean; n]
    } else {
        (0..n).map(|_| mean + std * rng.standard_normal()).collect()
    };
    Tensor::new(shape.to_vec(), data)
}
