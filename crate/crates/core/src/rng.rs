//! Seeded random streams.
//!
//! Every random stream in a run is a ChaCha8 substream of one master seed, so
//! adding clients or changing the scheduler never perturbs an existing stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream identifiers. Client drafting streams occupy `CLIENT_BASE + i`.
pub mod stream {
    pub const SCHEDULER: u64 = 1;
    pub const CLIENT_BASE: u64 = 1 << 16;
    pub const PROFILE_BASE: u64 = 1 << 32;
    pub const MODEL_BASE: u64 = 1 << 40;
    pub const ORACLE: u64 = 1 << 48;
}

/// A fresh generator for `seed`.
pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream `stream_id` of `seed`.
pub fn substream(seed: u64, stream_id: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_differ_and_repeat() {
        let a: Vec<u64> = (0..4)
            .map({
                let mut r = substream(9, 3);
                move |_| r.random()
            })
            .collect();
        let b: Vec<u64> = (0..4)
            .map({
                let mut r = substream(9, 3);
                move |_| r.random()
            })
            .collect();
        let c: Vec<u64> = (0..4)
            .map({
                let mut r = substream(9, 4);
                move |_| r.random()
            })
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
