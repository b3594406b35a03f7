//! Deterministic derivation of independent RNG seeds from a root seed and
//! a path of integers (client id, round, split, ...).

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed of the RNG stream a client uses during one synchronization round.
pub fn client_round_seed(seed: u64, client_id: usize, round: usize) -> u64 {
    derive_seed(seed, &[0x636c_6965_6e74, client_id as u64, round as u64])
}
