//! Deterministic plumbing shared across the pipeline: stable seed derivation,
//! a version-stable shuffle, and small summary-statistics helpers.
//!
//! Reproducibility is a hard requirement here: every sampled artifact must be
//! derivable from the run seed plus stable string identifiers, and must not
//! change when the dependency tree is upgraded. That is why seed derivation
//! goes through SHA-256 (fixed forever) and the shuffle is a hand-rolled
//! splitmix64 Fisher-Yates rather than a library shuffle whose draw pattern
//! may change between releases.

use sha2::{Digest, Sha256};

/// One step of the splitmix64 generator. Returns the new state and the output.
///
/// Published constants; the same sequence is trivially re-derivable in any
/// language, which keeps golden tests meaningful.
#[inline]
pub fn splitmix64(state: u64) -> (u64, u64) {
    let state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (state, z ^ (z >> 31))
}

/// Deterministic permutation of `0..n` from a seed: Fisher-Yates driven by
/// splitmix64. The modulo draw has negligible bias for the index ranges used
/// here and keeps the algorithm reproducible from its published description.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut state = seed;
    for i in (1..n).rev() {
        let (next, draw) = splitmix64(state);
        state = next;
        let j = (draw % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Derives a 64-bit seed from a root seed and a list of domain-separating
/// parts (identifiers, indices, phase names). Parts are length-prefixed so
/// that ("ab","c") and ("a","bc") cannot collide. SHA-256 keeps the mapping
/// stable across toolchain and dependency upgrades.
pub fn derive_seed(root: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Hex-encoded SHA-256 of a byte string; used to fingerprint run configs.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sample mean; 0.0 for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard error of the mean (sample standard deviation / sqrt n);
/// 0.0 when fewer than two values.
pub fn sem(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0);
    (var / n as f64).sqrt()
}

/// One-sided z for a 95% binomial lower bound (normal approximation).
pub const Z_95_ONE_SIDED: f64 = 1.644_853_626_951_472_2;

/// Normal-approximation binomial standard error sqrt(p(1-p)/m); 0.0 if m == 0.
pub fn binomial_sem(p: f64, m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / m as f64).sqrt()
}

/// One-sided 95% lower confidence bound for a binomial proportion
/// (normal approximation). Returns 0.0 for an empty sample.
pub fn binomial_lower_bound_95(p: f64, m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    p - Z_95_ONE_SIDED * binomial_sem(p, m)
}
