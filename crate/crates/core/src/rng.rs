//! Counted random streams.
//!
//! Every draw is addressed by `(seed, stream key, position)`, so a rollout's
//! randomness does not depend on which worker produced it or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tags mixed into stream keys so different consumers never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Dataset = 1,
    BatchSelect = 2,
    Rollout = 3,
    Eval = 4,
}

/// A ChaCha8 stream selected by a seed and a structured key.
#[derive(Debug, Clone)]
pub struct DrawStream {
    rng: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl DrawStream {
    pub fn new(seed: u64, tag: StreamTag, key: &[u64]) -> Self {
        let mut stream = splitmix(tag as u64);
        for &k in key {
            stream = splitmix(stream ^ k);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }
}
