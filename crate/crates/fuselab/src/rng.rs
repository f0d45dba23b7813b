//! Counter-based deterministic random values.
//!
//! Every draw is a pure hash of (seed, stream, index), so generation is
//! reproducible under any evaluation order or thread count. Not
//! cryptographically secure.

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of a (seed, stream, substream, index) tuple.
#[inline]
pub fn hash4(seed: u64, stream: u64, substream: u64, index: u64) -> u64 {
    const GOLD: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut h = mix(seed ^ GOLD);
    h = mix(h ^ stream.wrapping_mul(0xD134_2543_DE82_EF95));
    h = mix(h ^ substream.wrapping_mul(0x2545_F491_4F6C_DD1D));
    mix(h ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Map a hash to the open-closed interval (0, 1].
#[inline]
pub fn unit_f64(h: u64) -> f64 {
    ((h >> 11) + 1) as f64 / (1u64 << 53) as f64
}

/// Standard normal draw via Box-Muller from two counter hashes.
#[inline]
pub fn gauss(seed: u64, stream: u64, substream: u64, index: u64) -> f64 {
    let u1 = unit_f64(hash4(seed, stream, substream, 2 * index));
    let u2 = unit_f64(hash4(seed, stream, substream, 2 * index + 1));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
