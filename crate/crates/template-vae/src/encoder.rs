//! Inference-network encoder: turns a word sequence into the potentials of
//! a chain CRF.
//!
//! Emission potentials come from a position-wise affine map over a ±1
//! window of encoder word embeddings,
//!
//! ```text
//!   feat_t = w_prev · e(x_{t-1}) + w_curr · e(x_t) + w_next · e(x_{t+1}) + b_win
//!   emis_t = w_phi · feat_t + b_phi
//! ```
//!
//! with zero vectors in the out-of-range window slots; transition
//! potentials are the free matrix in [`InferenceParams`] and the initial
//! potentials are pinned to zero. The whole map is recorded on the tape, so
//! one backward pass through anything built on the potentials (forward
//! trellis, relaxed samples, entropy) reaches the encoder parameters.
//!
//! Window rows enter as constant one-hot matrices: `T×V` times `V×d` matrix
//! products rather than per-row gathers, which keeps the recording at a
//! handful of rank-2 nodes per example.

use crate::decoder::push_grad;
use crate::error::VaeError;
use crate::params::InferenceParams;
use crf_core::PotentialTable;
use estimators::record::TapePotentials;
use grad_engine::{NodeId, Tape};
use ndarray::{Array2, Ix2};

/// Encoder parameters as tape leaves, gradient-readable in the
/// [`InferenceParams`] flattening order.
#[derive(Debug, Clone, Copy)]
pub struct PhiNodes {
    pub enc_embed: NodeId,
    pub w_prev: NodeId,
    pub w_curr: NodeId,
    pub w_next: NodeId,
    pub b_win: NodeId,
    pub w_phi: NodeId,
    pub b_phi: NodeId,
    pub transition: NodeId,
}

impl PhiNodes {
    pub fn leaves(tape: &mut Tape, phi: &InferenceParams) -> Result<Self, VaeError> {
        phi.validate()?;
        Ok(PhiNodes {
            enc_embed: tape.leaf(phi.enc_embed.clone().into_dyn())?,
            w_prev: tape.leaf(phi.w_prev.clone().into_dyn())?,
            w_curr: tape.leaf(phi.w_curr.clone().into_dyn())?,
            w_next: tape.leaf(phi.w_next.clone().into_dyn())?,
            b_win: tape.leaf(phi.b_win.clone().into_dyn())?,
            w_phi: tape.leaf(phi.w_phi.clone().into_dyn())?,
            b_phi: tape.leaf(phi.b_phi.clone().into_dyn())?,
            transition: tape.leaf(phi.transition.clone().into_dyn())?,
        })
    }

    /// Appends the adjoints of every leaf to `out` in the flattening order;
    /// untouched leaves contribute zeros.
    pub fn read_grads(&self, tape: &Tape, out: &mut Vec<f64>) {
        for node in [
            self.enc_embed,
            self.w_prev,
            self.w_curr,
            self.w_next,
            self.b_win,
            self.w_phi,
            self.b_phi,
            self.transition,
        ] {
            push_grad(tape, node, out);
        }
    }
}

/// Row `t` is the one-hot of `x[t + shift]`, or all zeros when that index
/// falls off either end.
fn shifted_one_hot(x: &[usize], vocab: usize, shift: isize) -> Array2<f64> {
    let mut out = Array2::zeros((x.len(), vocab));
    for t in 0..x.len() {
        let src = t as isize + shift;
        if (0..x.len() as isize).contains(&src) {
            out[[t, x[src as usize]]] = 1.0;
        }
    }
    out
}

fn check_words(vocab: usize, x: &[usize]) -> Result<(), VaeError> {
    if x.is_empty() {
        return Err(VaeError::BadInput("empty word sequence".into()));
    }
    if let Some(&w) = x.iter().find(|&&w| w >= vocab) {
        return Err(VaeError::BadInput(format!(
            "word id {w} out of range for vocabulary {vocab}"
        )));
    }
    Ok(())
}

/// Records the encoder for one sequence and returns its CRF potentials as
/// tape nodes, ready for the trellis/sampling/entropy recorders.
pub fn record_encoder(
    tape: &mut Tape,
    phi_nodes: &PhiNodes,
    x: &[usize],
) -> Result<TapePotentials, VaeError> {
    let vocab = tape.value(phi_nodes.enc_embed).shape()[0];
    let num_states = tape.value(phi_nodes.transition).shape()[0];
    check_words(vocab, x)?;

    let prev = tape.constant(shifted_one_hot(x, vocab, -1).into_dyn())?;
    let curr = tape.constant(shifted_one_hot(x, vocab, 0).into_dyn())?;
    let next = tape.constant(shifted_one_hot(x, vocab, 1).into_dyn())?;
    let e_prev = tape.matmul(prev, phi_nodes.enc_embed)?;
    let e_curr = tape.matmul(curr, phi_nodes.enc_embed)?;
    let e_next = tape.matmul(next, phi_nodes.enc_embed)?;

    let wp_t = tape.transpose(phi_nodes.w_prev)?;
    let wc_t = tape.transpose(phi_nodes.w_curr)?;
    let wn_t = tape.transpose(phi_nodes.w_next)?;
    let from_prev = tape.matmul(e_prev, wp_t)?;
    let from_curr = tape.matmul(e_curr, wc_t)?;
    let from_next = tape.matmul(e_next, wn_t)?;
    let window = tape.add(from_prev, from_curr)?;
    let window = tape.add(window, from_next)?;
    let feats = tape.add(window, phi_nodes.b_win)?;

    let wphi_t = tape.transpose(phi_nodes.w_phi)?;
    let proj = tape.matmul(feats, wphi_t)?;
    let emission = tape.add(proj, phi_nodes.b_phi)?;
    let initial = tape.vector(&vec![0.0; num_states]);

    Ok(TapePotentials {
        transition: phi_nodes.transition,
        emission,
        initial,
        num_states,
        seq_len: x.len(),
    })
}

/// The encoder's CRF as a plain [`PotentialTable`], for value-level work
/// (FFBS draws, Viterbi, marginals, entropy oracles).
///
/// Evaluated by recording on a scratch tape and reading the values off, so
/// there is exactly one implementation of the encoder arithmetic.
pub fn potential_table(phi: &InferenceParams, x: &[usize]) -> Result<PotentialTable, VaeError> {
    let mut tape = Tape::new();
    let nodes = PhiNodes::leaves(&mut tape, phi)?;
    let pots = record_encoder(&mut tape, &nodes, x)?;
    let emission = tape
        .value(pots.emission)
        .clone()
        .into_dimensionality::<Ix2>()
        .expect("emission is rank 2");
    Ok(PotentialTable::new(
        phi.transition.clone(),
        emission,
        vec![0.0; phi.num_states()],
    )?)
}
