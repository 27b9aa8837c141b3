use crate::logspace::{logsumexp, xlnx};
use crate::{path_score, CrfError, HardPath, PotentialTable};
use ndarray::Array2;

/// Refuse to enumerate more paths than this by default.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// The fully enumerated posterior over all `K^T` paths, used as the
/// ground-truth oracle for the dynamic-programming routines and the
/// samplers.
///
/// Paths are generated in lexicographic order with position 0 most
/// significant, so path `z` lives at index `sum_t z_t * K^(T-1-t)`.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    k: usize,
    t: usize,
    paths: Vec<HardPath>,
    probs: Vec<f64>,
    log_z: f64,
}

/// Scores every path explicitly and normalizes.
///
/// Fails with [`CrfError::EnumerationTooLarge`] when `K^T > cap` and with
/// [`CrfError::AllPathsForbidden`] when the partition function is zero.
pub fn enumerate_posterior(table: &PotentialTable, cap: u128) -> Result<ExactPosterior, CrfError> {
    let (k, t) = (table.num_states(), table.seq_len());
    let n_paths = (k as u128)
        .checked_pow(t as u32)
        .ok_or(CrfError::EnumerationTooLarge {
            paths: u128::MAX,
            cap,
        })?;
    if n_paths > cap {
        return Err(CrfError::EnumerationTooLarge { paths: n_paths, cap });
    }
    let n = n_paths as usize;
    let mut paths = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut current = vec![0usize; t];
    loop {
        paths.push(current.clone());
        scores.push(path_score(table, &current)?);
        // Odometer increment, least-significant digit last.
        let mut pos = t;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            current[pos] += 1;
            if current[pos] < k {
                break;
            }
            current[pos] = 0;
        }
        if current.iter().all(|&z| z == 0) {
            break;
        }
    }
    debug_assert_eq!(paths.len(), n);
    let log_z = logsumexp(&scores);
    if log_z == f64::NEG_INFINITY {
        return Err(CrfError::AllPathsForbidden);
    }
    let probs = scores.iter().map(|s| (s - log_z).exp()).collect();
    Ok(ExactPosterior {
        k,
        t,
        paths,
        probs,
        log_z,
    })
}

impl ExactPosterior {
    pub fn num_states(&self) -> usize {
        self.k
    }

    pub fn seq_len(&self) -> usize {
        self.t
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn paths(&self) -> &[HardPath] {
        &self.paths
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index of `path` in enumeration order.
    pub fn index_of(&self, path: &[usize]) -> Result<usize, CrfError> {
        if path.len() != self.t {
            return Err(CrfError::BadPath(format!(
                "length {} does not match T = {}",
                path.len(),
                self.t
            )));
        }
        let mut idx = 0usize;
        for &z in path {
            if z >= self.k {
                return Err(CrfError::BadPath(format!(
                    "state {z} outside 0..{}",
                    self.k
                )));
            }
            idx = idx * self.k + z;
        }
        Ok(idx)
    }

    /// Posterior probability of one path.
    pub fn prob_of(&self, path: &[usize]) -> Result<f64, CrfError> {
        Ok(self.probs[self.index_of(path)?])
    }

    /// Position marginals accumulated path by path.
    pub fn marginals(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.t, self.k));
        for (path, &p) in self.paths.iter().zip(&self.probs) {
            for (t, &z) in path.iter().enumerate() {
                m[[t, z]] += p;
            }
        }
        m
    }

    /// Shannon entropy (nats) of the path distribution, `-sum p ln p`.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().map(|&p| xlnx(p)).sum::<f64>()
    }

    /// The most probable path; ties broken toward the lexicographically
    /// smallest path, matching Viterbi's lowest-index rule on generic tables.
    pub fn map_path(&self) -> &HardPath {
        let idx = crate::logspace::argmax(&self.probs);
        &self.paths[idx]
    }

    /// Expectation of an arbitrary path functional under the posterior.
    pub fn expectation(&self, f: impl Fn(&[usize]) -> f64) -> f64 {
        self.paths
            .iter()
            .zip(&self.probs)
            .map(|(path, &p)| p * f(path))
            .sum()
    }
}
