//! Counter-based seeding. Every random stream is derived from a master seed
//! plus a name and an index, so results never depend on evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed of the named substream `index` under `seed`.
pub fn substream_seed(seed: u64, name: &str, index: u64) -> u64 {
    mix64(mix64(seed ^ hash_name(name)).wrapping_add(mix64(index)))
}

pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, name, index))
}

/// Uniform draw in [0, 1) that depends only on its three keys.
pub fn keyed_unit(seed: u64, stream: u64, key: u64) -> f64 {
    let bits = mix64(mix64(seed ^ mix64(stream)) ^ key.wrapping_mul(0xD1B5_4A32_D192_ED03));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
