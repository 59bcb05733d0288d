//! Seed derivation. Every random draw in the system is keyed by a root seed
//! plus a path of integers (step, purpose, sample index, ...), so any draw
//! can be reproduced independently of the order in which others happen.

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(root), |acc, &p| splitmix(acc ^ splitmix(p)))
}
