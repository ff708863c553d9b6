//! Stable seed derivation. `std`'s hashers are not stable across releases,
//! so seeds are mixed with SplitMix64 and names with FNV-1a.

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Folds a sequence of words into one seed.
pub fn combine(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn mix_seed(seed: u64, name: &str) -> u64 {
    combine(&[seed, fnv1a(name.as_bytes())])
}

/// Per-sample seed: a pure function of `(global_seed, epoch, sample_index)`,
/// independent of the order in which samples are produced.
pub fn sample_seed(global_seed: u64, epoch: u64, sample_index: u64) -> u64 {
    combine(&[global_seed, epoch, sample_index])
}
