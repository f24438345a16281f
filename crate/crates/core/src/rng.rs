//! Deterministic RNG plumbing.
//!
//! Every stochastic decision in the pipeline draws from a ChaCha8 stream
//! derived from `(root seed, purpose, index)`. Derivation is stateless: the
//! stream for iteration `i` does not depend on how many draws iteration
//! `i-1` made, which is what makes checkpoint-resume bit-identical to an
//! uninterrupted run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Labels for independent RNG streams hanging off one root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization.
    Init,
    /// Episode sampling for a training iteration.
    TrainEpisode,
    /// Episode sampling for an evaluation run.
    EvalEpisode,
    /// Dataset synthesis.
    Synth,
    /// Dropout masks.
    Dropout,
    /// Token-pool row assignment within an episode.
    Pool,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x11,
            Stream::TrainEpisode => 0x22,
            Stream::EvalEpisode => 0x33,
            Stream::Synth => 0x44,
            Stream::Dropout => 0x55,
            Stream::Pool => 0x66,
        }
    }
}

/// ChaCha8 stream for `(seed, stream, index)`. The triple is hashed so that
/// nearby seeds or indices do not produce correlated streams.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.tag().to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derive a fresh sub-seed (for handing to a component that builds its own
/// streams, e.g. an episode).
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.tag().to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_independent() {
        let mut a = stream_rng(7, Stream::TrainEpisode, 3);
        let mut b = stream_rng(7, Stream::TrainEpisode, 3);
        assert_eq!(a.next_u64(), b.next_u64());

        let mut c = stream_rng(7, Stream::TrainEpisode, 4);
        let mut d = stream_rng(7, Stream::EvalEpisode, 3);
        let base = stream_rng(7, Stream::TrainEpisode, 3).next_u64();
        assert_ne!(base, c.next_u64());
        assert_ne!(base, d.next_u64());
    }

    #[test]
    fn derived_seeds_differ_by_index() {
        assert_ne!(
            derive_seed(1, Stream::Synth, 0),
            derive_seed(1, Stream::Synth, 1)
        );
    }
}
