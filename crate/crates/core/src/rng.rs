use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// splitmix64 finaliser
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, stream, index)`, so that e.g. the
/// sampling of epoch 17 does not depend on how many draws epoch 16 made.
pub fn derive(seed: u64, stream: u64, index: u64) -> Rng {
    Rng::seed_from_u64(mix(mix(seed ^ mix(stream)) ^ index))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Well-known stream ids.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const SSL: u64 = 3;
    pub const CHANNEL_NODES: u64 = 4;
    pub const SYNTH_CENTROIDS: u64 = 5;
    pub const SYNTH_FEATURES: u64 = 6;
    pub const SYNTH_EDGES: u64 = 7;
}
