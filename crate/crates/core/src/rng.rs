//! Reproducible random streams.
//!
//! Every stream is a ChaCha20 keystream (a counter-based generator). The
//! 256-bit key is four SplitMix64 outputs chained from the base seed and the
//! leading path elements; the final path element selects the 64-bit ChaCha
//! stream id. Replicate `r` of a study therefore reads
//! `stream(seed, &[DATASET, r])` and bootstrap draw `b` of that replicate reads
//! `stream(seed, &[BOOTSTRAP, r, b])`, independent of scheduling order.
//!
//! Variates are produced by fixed methods so other implementations can match
//! them bit for bit:
//! * uniform on `[0, 1)`: top 53 bits of `next_u64`, times `2^-53`;
//! * normal: Marsaglia's polar method, both values of each accepted pair used
//!   in order;
//! * exponential: inverse CDF `-ln(1 - u) / rate`.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

pub const DATASET: u64 = 1;
pub const BOOTSTRAP: u64 = 2;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct StreamRng {
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl StreamRng {
    pub fn new(seed: u64, path: &[u64]) -> Self {
        let (stream, prefix) = match path.split_last() {
            Some((last, rest)) => (*last, rest),
            None => (0, &[][..]),
        };
        let mut state = seed;
        for &p in prefix {
            state = splitmix64(&mut state) ^ p;
        }
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(stream);
        Self {
            inner,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by rejection (no modulo bias).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let v1 = 2.0 * self.uniform() - 1.0;
            let v2 = 2.0 * self.uniform() - 1.0;
            let s = v1 * v1 + v2 * v2;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v2 * f);
                return v1 * f;
            }
        }
    }

    pub fn exponential(&mut self, rate: f64) -> f64 {
        if rate <= 0.0 {
            return f64::INFINITY;
        }
        -(1.0 - self.uniform()).ln() / rate
    }
}
