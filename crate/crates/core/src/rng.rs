//! Named random streams derived from a single root seed.
//!
//! Every stochastic choice (initialization, data order, protocol sampling,
//! subset sampling) draws from its own [`ChaCha8Rng`] whose seed is a pure
//! function of the root seed, a label and a path of indices. Two runs with
//! the same root seed therefore agree regardless of the order in which the
//! streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{Reader, Writer};
use crate::error::Result;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `root`, `label` and `path` into a child seed.
pub fn derive_seed(root: u64, label: &str, path: &[u64]) -> u64 {
    let mut h = splitmix64(root);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h = splitmix64(h ^ 0xff);
    for &p in path {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn stream(root: u64, label: &str, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, path))
}

/// Uniform value in `[0, 1)` that depends only on its arguments.
pub fn hash_unit(root: u64, label: &str, index: u64) -> f64 {
    (derive_seed(root, label, &[index]) >> 11) as f64 / (1u64 << 53) as f64
}

pub(crate) fn write_rng(w: &mut Writer, rng: &ChaCha8Rng) {
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    w.u128(rng.get_word_pos());
}

pub(crate) fn read_rng(r: &mut Reader<'_>) -> Result<ChaCha8Rng> {
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}
