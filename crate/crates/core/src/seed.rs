//! Deterministic seed derivation so every pipeline stage owns an
//! independent, reproducible RNG stream.

/// SplitMix64 finalizer — bijective on u64, good avalanche.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `index` of a base seed. For a fixed base this is
/// injective in `index` (xor with a constant, then a bijection).
pub fn derive(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(1)))
}
