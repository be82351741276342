//! Deterministic child-seed derivation.
//!
//! Sweeps fan a single master seed out to many independent cells (dataset,
//! chains, test set per `(n, replication)`); each consumer derives its seed
//! by folding a role tag and the cell coordinates into the master seed with
//! splitmix64. The derivation is pure, so any cell can be recomputed in
//! isolation and results do not depend on execution order.

/// One splitmix64 step: a bijective 64-bit mix with good avalanche behavior.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `words` into `base` one splitmix64 round per word.
pub fn mix_seed(base: u64, words: &[u64]) -> u64 {
    let mut acc = splitmix64(base);
    for &w in words {
        acc = splitmix64(acc ^ w);
    }
    acc
}

/// Role tags for the independent random streams of a sweep cell.
pub mod stream {
    pub const TRUTH: u64 = 1;
    pub const DATASET: u64 = 2;
    pub const CHAINS: u64 = 3;
    pub const TEST_SET: u64 = 4;
}
