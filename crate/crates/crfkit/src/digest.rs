//! Bit-level fingerprints of oracle artifacts.
//!
//! Every golden instance stores one `u64` digest covering the enumeration
//! oracle's log partition value, posterior entropy, per-position marginals,
//! and MAP path. Regenerating the instance from its spec must reproduce the
//! digest bit for bit — any drift in the DP code, the enumeration order, or
//! the instance construction shows up as a digest mismatch before it shows
//! up as a subtle numeric shift.

use crf_core::{enumerate_posterior, CrfError, PotentialTable, DEFAULT_ENUMERATION_CAP};
use ndarray::Array2;

/// 64-bit FNV-1a. Stable, dependency-free, and plenty for regression
/// fingerprints (these digests defend against accidental drift, not
/// adversaries).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Enumeration-oracle values for one instance, plus their fingerprint.
#[derive(Debug, Clone)]
pub struct OracleArtifacts {
    pub log_z: f64,
    pub entropy: f64,
    /// `(T, K)` posterior marginals from enumeration.
    pub marginals: Array2<f64>,
    pub map_path: Vec<usize>,
    /// [`fnv1a64`] over the fields above, bit patterns in listed order.
    pub digest: u64,
}

/// Computes the enumeration oracle for `table` and fingerprints it.
pub fn oracle_artifacts(table: &PotentialTable) -> Result<OracleArtifacts, CrfError> {
    let post = enumerate_posterior(table, DEFAULT_ENUMERATION_CAP)?;
    let log_z = post.log_z();
    let entropy = post.entropy();
    let marginals = post.marginals();
    let map_path = post.map_path().clone();

    let mut bytes = Vec::with_capacity(16 + 8 * (marginals.len() + map_path.len()));
    bytes.extend_from_slice(&log_z.to_bits().to_le_bytes());
    bytes.extend_from_slice(&entropy.to_bits().to_le_bytes());
    for &m in marginals.iter() {
        bytes.extend_from_slice(&m.to_bits().to_le_bytes());
    }
    for &z in &map_path {
        bytes.extend_from_slice(&(z as u64).to_le_bytes());
    }
    let digest = fnv1a64(&bytes);

    Ok(OracleArtifacts {
        log_z,
        entropy,
        marginals,
        map_path,
        digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fnv_matches_reference_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn digest_is_reproducible_and_input_sensitive() {
        let table = PotentialTable::new(
            array![[0.3, -0.1], [0.2, 0.4]],
            array![[0.1, -0.2], [0.0, 0.5], [0.3, 0.1]],
            vec![0.2, -0.1],
        )
        .unwrap();
        let a = oracle_artifacts(&table).unwrap();
        let b = oracle_artifacts(&table).unwrap();
        assert_eq!(a.digest, b.digest);
        assert_eq!(a.log_z.to_bits(), b.log_z.to_bits());

        let nudged = PotentialTable::new(
            array![[0.3, -0.1], [0.2, 0.4000000001]],
            array![[0.1, -0.2], [0.0, 0.5], [0.3, 0.1]],
            vec![0.2, -0.1],
        )
        .unwrap();
        assert_ne!(a.digest, oracle_artifacts(&nudged).unwrap().digest);
    }
}
