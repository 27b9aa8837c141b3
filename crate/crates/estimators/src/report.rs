use crate::EstimatorError;
use serde::{Deserialize, Serialize};

/// Log variance-to-signal ratio of a batch of per-sample gradients, with
/// the degenerate denominators and numerators called out explicitly instead
/// of collapsing to `-inf`/`NaN`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceRatio {
    /// `ln( mean_j Var[g_j] / ||mean g||_2 )`.
    Finite(f64),
    /// Every sample produced the same gradient (zero variance).
    IdenticalGradients,
    /// The mean gradient is exactly zero, so the ratio has no scale.
    ZeroMeanGradient,
}

impl VarianceRatio {
    pub fn finite(self) -> Option<f64> {
        match self {
            VarianceRatio::Finite(v) => Some(v),
            _ => None,
        }
    }

    pub fn degeneracy(self) -> Option<&'static str> {
        match self {
            VarianceRatio::Finite(_) => None,
            VarianceRatio::IdenticalGradients => Some("identical_gradients"),
            VarianceRatio::ZeroMeanGradient => Some("zero_mean_gradient"),
        }
    }
}

/// `ln( mean per-coordinate unbiased variance / L2 norm of mean gradient )`
/// from already-reduced statistics.
pub fn variance_ratio(mean: &[f64], var: &[f64]) -> Result<VarianceRatio, EstimatorError> {
    if mean.len() != var.len() || mean.is_empty() {
        return Err(EstimatorError::BadOptions(format!(
            "variance_ratio needs matching non-empty mean/var, got {} and {}",
            mean.len(),
            var.len()
        )));
    }
    let mean_var = var.iter().sum::<f64>() / var.len() as f64;
    let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    if mean_var == 0.0 {
        return Ok(VarianceRatio::IdenticalGradients);
    }
    if norm == 0.0 {
        return Ok(VarianceRatio::ZeroMeanGradient);
    }
    Ok(VarianceRatio::Finite((mean_var / norm).ln()))
}

/// Streaming per-coordinate mean/variance over gradient samples
/// (Welford's recurrence; unbiased variance with the `n - 1` denominator).
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    value_sum: f64,
}

impl GradAccumulator {
    pub fn new(dim: usize) -> Self {
        GradAccumulator {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            value_sum: 0.0,
        }
    }

    /// Adds one per-sample gradient and its objective value.
    pub fn push(&mut self, grad: &[f64], value: f64) {
        assert_eq!(grad.len(), self.mean.len(), "gradient dimension changed");
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &g) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(grad) {
            let d = g - *m;
            *m += d / n;
            *s += d * (g - *m);
        }
        self.value_sum += value;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased per-coordinate variance; empty when fewer than two samples
    /// were seen.
    pub fn variance(&self) -> Vec<f64> {
        if self.n < 2 {
            return Vec::new();
        }
        self.m2.iter().map(|s| s / (self.n - 1) as f64).collect()
    }

    pub fn mean_value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.value_sum / self.n as f64
        }
    }
}

/// One finished gradient estimate, shaped for JSONL logging.
///
/// `mean_grad` follows the layout documented by
/// [`crate::record::flatten_order`]: transition block row-major, emission
/// block row-major, then the initial vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradReport {
    pub estimator: String,
    pub n_samples: usize,
    pub param_dim: usize,
    pub mean_grad: Vec<f64>,
    /// Unbiased per-coordinate variance; empty when `n_samples < 2`.
    pub var_grad: Vec<f64>,
    /// `ln(mean variance / ||mean grad||)`, absent when it is degenerate or
    /// when fewer than two samples were drawn.
    pub log_variance_ratio: Option<f64>,
    /// Why `log_variance_ratio` is absent: `"single_sample"`,
    /// `"identical_gradients"` or `"zero_mean_gradient"`.
    pub degenerate: Option<String>,
    /// Mean observed objective value (after reward scaling).
    pub mean_objective: f64,
    pub seconds: f64,
}

impl GradReport {
    /// Builds the report from accumulated statistics.
    pub fn from_accumulator(
        estimator: String,
        acc: &GradAccumulator,
        seconds: f64,
    ) -> Result<Self, EstimatorError> {
        let mean = acc.mean().to_vec();
        let var = acc.variance();
        let (ratio, degenerate) = if acc.count() < 2 {
            (None, Some("single_sample".to_string()))
        } else {
            match variance_ratio(&mean, &var)? {
                VarianceRatio::Finite(v) => (Some(v), None),
                other => (None, other.degeneracy().map(str::to_string)),
            }
        };
        Ok(GradReport {
            estimator,
            n_samples: acc.count(),
            param_dim: mean.len(),
            mean_grad: mean,
            var_grad: var,
            log_variance_ratio: ratio,
            degenerate,
            mean_objective: acc.mean_value(),
            seconds,
        })
    }

    /// One-line JSON suitable for appending to a `.jsonl` log.
    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("GradReport serializes")
    }

    /// L2 distance between the mean gradient and a reference gradient.
    pub fn bias_l2(&self, reference: &[f64]) -> f64 {
        assert_eq!(reference.len(), self.mean_grad.len());
        self.mean_grad
            .iter()
            .zip(reference)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Largest componentwise z-score of the mean gradient against a reference:
/// `|mean_j - ref_j| / sqrt(var_j / n)`.
///
/// Coordinates where both the deviation and the variance vanish score 0; a
/// nonzero deviation with zero variance scores infinity. Returns `None`
/// when no variance is available (`n < 2`).
pub fn max_z_score(report: &GradReport, reference: &[f64]) -> Option<f64> {
    if report.var_grad.is_empty() {
        return None;
    }
    assert_eq!(reference.len(), report.mean_grad.len());
    let n = report.n_samples as f64;
    let mut worst: f64 = 0.0;
    for ((&m, &r), &v) in report
        .mean_grad
        .iter()
        .zip(reference)
        .zip(&report.var_grad)
    {
        let diff = (m - r).abs();
        let se = (v / n).sqrt();
        let z = if diff == 0.0 {
            0.0
        } else if se == 0.0 {
            f64::INFINITY
        } else {
            diff / se
        };
        worst = worst.max(z);
    }
    Some(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass_statistics() {
        let samples: Vec<Vec<f64>> = vec![
            vec![1.0, -2.0],
            vec![0.5, 0.0],
            vec![-1.5, 4.0],
            vec![2.0, 1.0],
        ];
        let mut acc = GradAccumulator::new(2);
        for s in &samples {
            acc.push(s, 0.0);
        }
        for j in 0..2 {
            let mean: f64 = samples.iter().map(|s| s[j]).sum::<f64>() / 4.0;
            let var: f64 = samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / 3.0;
            assert!((acc.mean()[j] - mean).abs() < 1e-12);
            assert!((acc.variance()[j] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_ratio_hand_computed() {
        // mean = [3, 4] (norm 5), var = [2, 8] (mean 5) => ln(1) = 0.
        let r = variance_ratio(&[3.0, 4.0], &[2.0, 8.0]).unwrap();
        assert_eq!(r, VarianceRatio::Finite(0.0));
    }

    #[test]
    fn variance_ratio_flags_degeneracies() {
        assert_eq!(
            variance_ratio(&[1.0, 0.0], &[0.0, 0.0]).unwrap(),
            VarianceRatio::IdenticalGradients
        );
        assert_eq!(
            variance_ratio(&[0.0, 0.0], &[1.0, 1.0]).unwrap(),
            VarianceRatio::ZeroMeanGradient
        );
        // Zero variance takes precedence: all-identical zero gradients are
        // "identical", not "zero mean".
        assert_eq!(
            variance_ratio(&[0.0], &[0.0]).unwrap(),
            VarianceRatio::IdenticalGradients
        );
        assert!(variance_ratio(&[], &[]).is_err());
    }

    #[test]
    fn single_sample_report_is_flagged_not_errored() {
        let mut acc = GradAccumulator::new(3);
        acc.push(&[1.0, 2.0, 3.0], 0.5);
        let r = GradReport::from_accumulator("gumbel_crf".into(), &acc, 0.01).unwrap();
        assert_eq!(r.n_samples, 1);
        assert!(r.var_grad.is_empty());
        assert_eq!(r.log_variance_ratio, None);
        assert_eq!(r.degenerate.as_deref(), Some("single_sample"));
        assert_eq!(r.mean_objective, 0.5);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut acc = GradAccumulator::new(2);
        acc.push(&[0.1, -0.2], 1.0);
        acc.push(&[0.3, 0.1], 2.0);
        let r = GradReport::from_accumulator("reinforce_ms".into(), &acc, 0.5).unwrap();
        let line = r.to_jsonl();
        assert!(!line.contains('\n'));
        let back: GradReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back.mean_grad, r.mean_grad);
        assert_eq!(back.estimator, "reinforce_ms");
    }

    #[test]
    fn z_score_detects_mismatch_and_tolerates_exact_match() {
        let mut acc = GradAccumulator::new(2);
        for i in 0..100 {
            let x = if i % 2 == 0 { 0.9 } else { 1.1 };
            acc.push(&[x, 5.0], 0.0);
        }
        let r = GradReport::from_accumulator("t".into(), &acc, 0.0).unwrap();
        // First coordinate: mean 1.0, tight; reference matches.
        let z = max_z_score(&r, &[1.0, 5.0]).unwrap();
        assert!(z < 1e-6, "z = {z}");
        // Wrong reference on a zero-variance coordinate => infinite z.
        let z = max_z_score(&r, &[1.0, 4.0]).unwrap();
        assert!(z.is_infinite());
    }
}
