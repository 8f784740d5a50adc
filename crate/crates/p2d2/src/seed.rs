//! Named substream derivation from a single master seed.
//!
//! Every source of randomness in a run (graph generation, data synthesis,
//! initialization) draws from its own substream so that changing one knob
//! never perturbs the others. Derivation is a plain FNV-1a hash over the
//! master seed and a label, which is stable across platforms and releases.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Derives a child seed from `master` and a substream label.
pub fn derive(master: u64, label: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for byte in master.to_le_bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(FNV_PRIME);
    }
    for byte in label.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derives a numbered substream, e.g. one seed per retry attempt.
pub fn derive_indexed(master: u64, label: &str, index: u64) -> u64 {
    derive(derive(master, label), &index.to_string())
}
