use crate::SampleError;
use crf_core::{ExactPosterior, HardPath};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::HashMap;

/// Cells with expected count below this are pooled before the chi-square
/// statistic is formed; the asymptotic distribution is unreliable otherwise.
pub const MIN_EXPECTED_PER_CELL: f64 = 5.0;

/// Outcome of a chi-square goodness-of-fit test.
#[derive(Debug, Clone)]
pub struct GofTest {
    pub statistic: f64,
    pub dof: usize,
    /// Critical value at the requested significance.
    pub threshold: f64,
    pub significance: f64,
    /// `true` when the statistic does not exceed the critical value, i.e.
    /// the empirical counts are consistent with the expected distribution.
    pub passed: bool,
    /// Number of original cells merged into the pooled remainder cell.
    pub pooled_cells: usize,
}

/// Pearson chi-square test of `observed` counts against `expected`
/// probabilities.
///
/// Cells whose expected count falls below [`MIN_EXPECTED_PER_CELL`] are
/// merged into a single remainder cell (and, if that cell is still too
/// small, folded into the largest retained cell). Degrees of freedom are
/// `cells - 1` after pooling.
pub fn chi_square_gof(
    observed: &[u64],
    expected: &[f64],
    significance: f64,
) -> Result<GofTest, SampleError> {
    if observed.len() != expected.len() {
        return Err(SampleError::DimensionMismatch(format!(
            "{} observed cells vs {} expected",
            observed.len(),
            expected.len()
        )));
    }
    if !(0.0..1.0).contains(&significance) || significance == 0.0 {
        return Err(SampleError::DegenerateTest(format!(
            "significance must be in (0, 1), got {significance}"
        )));
    }
    let n: u64 = observed.iter().sum();
    if n == 0 {
        return Err(SampleError::DegenerateTest("no observations".into()));
    }
    let total_p: f64 = expected.iter().sum();
    if (total_p - 1.0).abs() > 1e-6 || expected.iter().any(|&p| p < 0.0) {
        return Err(SampleError::DegenerateTest(format!(
            "expected probabilities sum to {total_p}"
        )));
    }

    let mut kept: Vec<(f64, f64)> = Vec::new(); // (observed, expected) counts
    let mut pool_obs = 0.0;
    let mut pool_exp = 0.0;
    let mut pooled_cells = 0usize;
    for (&o, &p) in observed.iter().zip(expected) {
        let e = p * n as f64;
        if e < MIN_EXPECTED_PER_CELL {
            pool_obs += o as f64;
            pool_exp += e;
            pooled_cells += 1;
        } else {
            kept.push((o as f64, e));
        }
    }
    if pooled_cells > 0 && pool_exp >= MIN_EXPECTED_PER_CELL {
        kept.push((pool_obs, pool_exp));
    } else if pooled_cells > 0 {
        // Remainder is still too thin: fold it into the largest kept cell,
        // or fail if nothing was kept.
        match kept
            .iter_mut()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        {
            Some(cell) => {
                cell.0 += pool_obs;
                cell.1 += pool_exp;
            }
            None => {
                return Err(SampleError::DegenerateTest(
                    "every cell is below the pooling threshold".into(),
                ))
            }
        }
    }
    if kept.len() < 2 {
        return Err(SampleError::DegenerateTest(format!(
            "only {} cell(s) after pooling",
            kept.len()
        )));
    }

    let statistic: f64 = kept
        .iter()
        .map(|&(o, e)| {
            let d = o - e;
            d * d / e
        })
        .sum();
    let dof = kept.len() - 1;
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| SampleError::DegenerateTest(format!("chi-square dof {dof}: {e}")))?;
    let threshold = dist.inverse_cdf(1.0 - significance);
    Ok(GofTest {
        statistic,
        dof,
        threshold,
        significance,
        passed: statistic <= threshold,
        pooled_cells,
    })
}

/// Total-variation distance `0.5 * sum_i |p_i - q_i|` between two
/// distributions given as aligned probability vectors.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum::<f64>()
}

/// Empirical path histogram with comparisons against an enumerated
/// posterior.
#[derive(Debug, Clone, Default)]
pub struct PathCounts {
    counts: HashMap<HardPath, u64>,
    total: u64,
}

impl PathCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: HardPath) {
        *self.counts.entry(path).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, path: &[usize]) -> u64 {
        self.counts.get(path).copied().unwrap_or(0)
    }

    /// Counts aligned with the posterior's enumeration order. Errors if a
    /// recorded path lies outside the posterior's support universe.
    pub fn aligned_counts(&self, posterior: &ExactPosterior) -> Result<Vec<u64>, SampleError> {
        let mut out = vec![0u64; posterior.paths().len()];
        for (path, &c) in &self.counts {
            out[posterior.index_of(path)?] += c;
        }
        Ok(out)
    }

    /// Total-variation distance between the empirical distribution and the
    /// exact posterior.
    pub fn empirical_tv(&self, posterior: &ExactPosterior) -> Result<f64, SampleError> {
        if self.total == 0 {
            return Err(SampleError::DegenerateTest("no observations".into()));
        }
        let counts = self.aligned_counts(posterior)?;
        let n = self.total as f64;
        let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        Ok(tv_distance(&emp, posterior.probs()))
    }

    /// Chi-square goodness-of-fit of the recorded paths against the exact
    /// posterior.
    pub fn gof_against(
        &self,
        posterior: &ExactPosterior,
        significance: f64,
    ) -> Result<GofTest, SampleError> {
        let counts = self.aligned_counts(posterior)?;
        chi_square_gof(&counts, posterior.probs(), significance)
    }
}
