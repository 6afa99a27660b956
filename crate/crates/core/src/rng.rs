//! Counter-based random streams.
//!
//! Every randomized step in the crate draws from a stream identified by a
//! `(master_seed, stream_id)` pair. The ChaCha key is expanded from the master
//! seed and the stream id selects the ChaCha nonce, so resampling iteration `k`
//! can run on any thread, in any order, and still see the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifies one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

/// Derive the stream `stream_id` of `master_seed`. Pure; no global state.
pub fn derive_stream(master_seed: u64, stream_id: u64) -> RngStream {
    RngStream {
        master_seed,
        stream_id,
    }
}

impl RngStream {
    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Child stream, used when one logical task needs several independent
    /// sub-streams (for example one per permutation and then one per
    /// resampling iteration inside it).
    pub fn child(&self, id: u64) -> RngStream {
        // splitmix64 finalizer keeps children of different parents apart
        let mut z = self
            .master_seed
            .wrapping_add(self.stream_id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(0x632B_E59B_D9B4_E019);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        RngStream {
            master_seed: z,
            stream_id: id,
        }
    }
}
