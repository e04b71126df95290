use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent PRNG stream for `(tag, parts...)`; at most three parts.
pub(crate) fn keyed(tag: u8, parts: &[u64]) -> ChaCha8Rng {
    assert!(parts.len() <= 3);
    let mut key = [0u8; 32];
    for (i, p) in parts.iter().enumerate() {
        key[8 * i..8 * i + 8].copy_from_slice(&p.to_le_bytes());
    }
    key[24] = tag;
    key[25] = parts.len() as u8;
    ChaCha8Rng::from_seed(key)
}

pub(crate) mod tags {
    pub const FLIP: u8 = 1;
    pub const SCENE: u8 = 2;
    pub const INIT: u8 = 3;
    pub const SHUFFLE: u8 = 4;
    pub const BENCH: u8 = 5;
}
