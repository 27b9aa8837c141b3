//! Posterior-collapse detectors.
//!
//! Two distinct failure modes show up when the entropy weight is mistuned:
//! the posterior stops depending on the input (every example gets the same
//! `q_φ(z | x)` — typically when the entropy bonus is too weak and the
//! decoder learned to ignore `z`), or it flattens out entirely (near-uniform
//! marginals everywhere — entropy bonus too strong). Both are scored on
//! posterior marginals so they are cheap enough to log every epoch.

use crate::encoder::potential_table;
use crate::error::VaeError;
use crate::params::InferenceParams;
use crf_core::logspace::xlnx;
use crf_core::marginals;
use serde::{Deserialize, Serialize};
use structured_sampling::tv_distance;

/// Mean pairwise total-variation distance below which the posterior is
/// declared input-independent ("constant" collapse).
pub const CONSTANT_POSTERIOR_TV: f64 = 0.02;

/// Mean per-position entropy (relative to `ln K`) above which the posterior
/// is declared uninformative ("uniform" collapse).
pub const UNIFORM_POSTERIOR_ENTROPY: f64 = 0.98;

/// Posterior-collapse scores over a batch of examples, both in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseDiagnostics {
    /// Mean pairwise TV distance between per-position posterior marginals of
    /// different examples. Near zero means the posterior ignores the input.
    pub constant_posterior_score: f64,
    /// Mean per-position marginal entropy divided by `ln K`. Near one means
    /// the posterior is uninformative noise.
    pub uniform_posterior_score: f64,
}

impl CollapseDiagnostics {
    /// Input-independent posterior (score under [`CONSTANT_POSTERIOR_TV`]).
    pub fn is_constant_posterior(&self) -> bool {
        self.constant_posterior_score < CONSTANT_POSTERIOR_TV
    }

    /// Near-uniform posterior (score over [`UNIFORM_POSTERIOR_ENTROPY`]).
    pub fn is_uniform_posterior(&self) -> bool {
        self.uniform_posterior_score > UNIFORM_POSTERIOR_ENTROPY
    }
}

/// Score the inference network's posteriors over `examples`.
///
/// TV distances are averaged over all example pairs and the positions both
/// sequences share; entropies are averaged over every position of every
/// example. Needs at least two examples (one example carries no evidence of
/// input-independence). Sequence length is part of the input: comparing
/// chains of different lengths picks up small end-of-chain marginal
/// differences even from a content-blind encoder, which is what the
/// [`CONSTANT_POSTERIOR_TV`] margin absorbs.
pub fn collapse_diagnostics(
    phi: &InferenceParams,
    examples: &[Vec<usize>],
) -> Result<CollapseDiagnostics, VaeError> {
    if examples.len() < 2 {
        return Err(VaeError::BadInput(
            "collapse diagnostics need at least two examples".into(),
        ));
    }
    let k = phi.num_states();
    let posteriors = examples
        .iter()
        .map(|x| Ok(marginals(&potential_table(phi, x)?)?))
        .collect::<Result<Vec<_>, VaeError>>()?;

    let mut entropy_sum = 0.0;
    let mut positions = 0usize;
    for m in &posteriors {
        for row in m.rows() {
            entropy_sum -= row.iter().copied().map(xlnx).sum::<f64>();
            positions += 1;
        }
    }
    let uniform_posterior_score = if k == 1 {
        1.0
    } else {
        entropy_sum / positions as f64 / (k as f64).ln()
    };

    let mut tv_sum = 0.0;
    let mut tv_count = 0usize;
    for i in 0..posteriors.len() {
        for j in i + 1..posteriors.len() {
            let shared = posteriors[i].nrows().min(posteriors[j].nrows());
            for t in 0..shared {
                let a = posteriors[i].row(t);
                let b = posteriors[j].row(t);
                tv_sum += tv_distance(a.as_slice().unwrap(), b.as_slice().unwrap());
                tv_count += 1;
            }
        }
    }
    let constant_posterior_score = tv_sum / tv_count as f64;

    Ok(CollapseDiagnostics {
        constant_posterior_score,
        uniform_posterior_score,
    })
}
