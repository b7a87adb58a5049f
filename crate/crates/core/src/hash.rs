//! 64-bit avalanche mixing and derived uniform values.
//!
//! Every pseudorandom decision in this crate (green/red vocabulary splits,
//! synthetic logits, per-trial random streams) bottoms out in [`mix64`], so
//! all of them are bit-identical across platforms. The constants are frozen
//! by golden-value tests; changing them invalidates every recorded value in
//! the test suite.

/// Finalizer-style multiply-xor-shift mixer (the splitmix64 output function
/// with its golden-ratio increment folded in, so `mix64(0) != 0`).
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Maps a mixed 64-bit value to the open unit interval (0, 1).
///
/// Uses the top 52 bits offset by half a step, so both the value and its
/// scaled result are exactly representable and neither endpoint is
/// reachable: the range is [2^-53, 1 - 2^-53].
#[inline]
pub fn unit_open(x: u64) -> f64 {
    ((x >> 12) as f64 + 0.5) * (1.0 / 4_503_599_627_370_496.0)
}

/// Order-sensitive chain hash of a token slice.
#[inline]
pub fn chain_hash(init: u64, tokens: &[u32]) -> u64 {
    tokens
        .iter()
        .fold(init, |h, &t| mix64(h ^ u64::from(t)))
}

/// Derives the seed for the `index`-th independent stream of a run.
#[inline]
pub fn stream_seed(base: u64, index: u64) -> u64 {
    mix64(base ^ mix64(index.wrapping_add(1)))
}
