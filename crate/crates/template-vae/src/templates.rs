//! Reading latent templates back out of a trained model: the MAP state path
//! under the inference network, and its collapsed run-length form.

use crate::encoder::potential_table;
use crate::error::VaeError;
use crate::params::InferenceParams;
use crf_core::{viterbi, HardPath};

/// MAP decode of the posterior `q_φ(z | x)` — the template the model assigns
/// to `x`.
pub fn extract_template(phi: &InferenceParams, x: &[usize]) -> Result<HardPath, VaeError> {
    Ok(viterbi(&potential_table(phi, x)?)?)
}

/// Collapse consecutive repeats, e.g. `[1, 1, 2, 2, 3] -> [1, 2, 3]`, turning
/// a per-position state path into the segment-level template it spells out.
pub fn collapse_states(path: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(path.len());
    for &state in path {
        if out.last() != Some(&state) {
            out.push(state);
        }
    }
    out
}
