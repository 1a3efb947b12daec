//! Seeded random substreams.
//!
//! One run seed fans out into independent ChaCha streams, one per consumer,
//! so adding draws in one component never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    Pose = 1,
    Pattern = 2,
    Latent = 3,
    Jitter = 4,
    RealImage = 5,
    Init = 6,
    Kid = 7,
    Phantom = 8,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Stream keyed by an arbitrary label, e.g. a parameter name.
pub fn keyed(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label.as_bytes()));
    rng.set_stream(Stream::Init as u64);
    rng
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Serializable position of a substream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub stream: Stream,
    pub word_pos: u128,
}

impl StreamState {
    pub fn capture(stream: Stream, rng: &ChaCha8Rng) -> Self {
        Self {
            stream,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self, seed: u64) -> ChaCha8Rng {
        let mut rng = substream(seed, self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_and_replayable() {
        let mut a = substream(7, Stream::Pose);
        let mut b = substream(7, Stream::Pattern);
        let xa: u64 = a.random();
        let xb: u64 = b.random();
        assert_ne!(xa, xb);
        let mut a2 = substream(7, Stream::Pose);
        assert_eq!(xa, a2.random::<u64>());
    }

    #[test]
    fn state_round_trip() {
        let mut r = substream(3, Stream::Jitter);
        for _ in 0..5 {
            let _: f64 = r.random();
        }
        let st = StreamState::capture(Stream::Jitter, &r);
        let mut back = st.restore(3);
        assert_eq!(r.random::<u64>(), back.random::<u64>());
    }
}
