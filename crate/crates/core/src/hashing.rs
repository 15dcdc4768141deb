//! Hash helpers shared by the cache, the seed policy and the mock backends.

use sha2::{Digest, Sha256};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// FNV-1a over several fields joined with `\n`.
pub fn fnv1a64_fields(fields: &[&str]) -> u64 {
    fnv1a64(fields.join("\n").as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Per-item seed derived from the run seed and the item id.
pub fn item_seed(run_seed: u64, item_id: &str) -> u64 {
    fnv1a64_fields(&[&run_seed.to_string(), item_id])
}
