//! The autoregressive decoder: joint log-probability of a word sequence and
//! a control-state sequence.
//!
//! ```text
//!   h_t  = tanh(w_in · [e(z_{t-1}); e(x_{t-1})] + w_hh · h_{t-1} + b_h)
//!   log p(z_t | past) = log softmax(w_state · h_t + b_state)[z_t]
//!   log p(x_t | z_t, past) = log softmax(w_word · [e(z_t); h_t] + b_word)[x_t]
//! ```
//!
//! with zero vectors for the step-0 inputs. The joint factorizes
//! autoregressively over both sequences, so it is normalized by
//! construction.
//!
//! States enter in two interchangeable forms. A hard path indexes embedding
//! rows directly; a relaxed path supplies per-position probability rows
//! `z̃_t`, which enter through the expected embedding `z̃_t · E_z` and through
//! `z̃_t · log softmax(..)` in place of the indexed lookup. On exactly
//! one-hot rows the two agree bit for bit, and [`record_joint`] replays the
//! same arithmetic on the tape so gradients are available for either form.

use crate::error::VaeError;
use crate::params::GenerativeParams;
use crf_core::logspace::logsumexp;
use grad_engine::{NodeId, Tape};
use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};

/// One recurrent-cell update: returns the new hidden state and the state
/// logits it induces. Word logits need the realized `z_t` and live in
/// [`word_logits`].
pub fn decoder_step(
    theta: &GenerativeParams,
    z_prev_embed: ArrayView1<f64>,
    x_prev_embed: ArrayView1<f64>,
    h_prev: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>), VaeError> {
    let (d, h) = (theta.embed_dim(), theta.hidden_dim());
    if z_prev_embed.len() != d || x_prev_embed.len() != d || h_prev.len() != h {
        return Err(VaeError::BadInput(format!(
            "decoder_step inputs ({}, {}, {}) do not match embed dim {d} / hidden dim {h}",
            z_prev_embed.len(),
            x_prev_embed.len(),
            h_prev.len()
        )));
    }
    let input = concatenate![Axis(0), z_prev_embed, x_prev_embed];
    let pre = theta.w_in.dot(&input) + theta.w_hh.dot(&h_prev) + &theta.b_h;
    let hidden = pre.mapv(f64::tanh);
    let state_logits = theta.w_state.dot(&hidden) + &theta.b_state;
    Ok((hidden, state_logits))
}

/// Word logits for a realized (or expected) state embedding and hidden
/// state: `w_word · [z_embed; h] + b_word`.
pub fn word_logits(
    theta: &GenerativeParams,
    z_embed: ArrayView1<f64>,
    hidden: ArrayView1<f64>,
) -> Result<Array1<f64>, VaeError> {
    if z_embed.len() != theta.embed_dim() || hidden.len() != theta.hidden_dim() {
        return Err(VaeError::BadInput(format!(
            "word_logits inputs ({}, {}) do not match embed dim {} / hidden dim {}",
            z_embed.len(),
            hidden.len(),
            theta.embed_dim(),
            theta.hidden_dim()
        )));
    }
    let input = concatenate![Axis(0), z_embed, hidden];
    Ok(theta.w_word.dot(&input) + &theta.b_word)
}

fn check_words(theta: &GenerativeParams, x: &[usize]) -> Result<(), VaeError> {
    if x.is_empty() {
        return Err(VaeError::BadInput("empty word sequence".into()));
    }
    if let Some(&w) = x.iter().find(|&&w| w >= theta.num_words()) {
        return Err(VaeError::BadInput(format!(
            "word id {w} out of range for vocabulary {}",
            theta.num_words()
        )));
    }
    Ok(())
}

fn check_dropout(x_len: usize, dropout: Option<&[bool]>) -> Result<(), VaeError> {
    if let Some(mask) = dropout {
        if mask.len() != x_len {
            return Err(VaeError::BadInput(format!(
                "dropout mask length {} != sequence length {x_len}",
                mask.len()
            )));
        }
    }
    Ok(())
}

/// Is the embedding of word `x[t]` withheld from the step-`t+1` input?
///
/// `dropout[t] = true` zeroes `e(x_t)` where it would be fed forward (word
/// dropout); the position-`t` *output* factor `p(x_t | ..)` is unaffected.
/// `dropout[T-1]` is vacuous — the last word is never an input.
fn dropped(dropout: Option<&[bool]>, t: usize) -> bool {
    dropout.map_or(false, |m| m[t])
}

/// `log p_θ(x, z)` for a hard state path.
pub fn joint_log_prob_hard(
    theta: &GenerativeParams,
    x: &[usize],
    z: &[usize],
    dropout: Option<&[bool]>,
) -> Result<f64, VaeError> {
    check_words(theta, x)?;
    check_dropout(x.len(), dropout)?;
    if z.len() != x.len() {
        return Err(VaeError::BadInput(format!(
            "state path length {} != word sequence length {}",
            z.len(),
            x.len()
        )));
    }
    if let Some(&s) = z.iter().find(|&&s| s >= theta.num_states()) {
        return Err(VaeError::BadInput(format!(
            "state id {s} out of range for {} states",
            theta.num_states()
        )));
    }
    let (d, h) = (theta.embed_dim(), theta.hidden_dim());
    let mut z_prev_e = Array1::zeros(d);
    let mut x_prev_e = Array1::zeros(d);
    let mut h_prev = Array1::zeros(h);
    let mut total = 0.0;
    for t in 0..x.len() {
        let (hidden, s_logits) =
            decoder_step(theta, z_prev_e.view(), x_prev_e.view(), h_prev.view())?;
        total += s_logits[z[t]] - logsumexp(s_logits.as_slice().expect("contiguous"));
        let z_e = theta.state_embed.row(z[t]).to_owned();
        let w_logits = word_logits(theta, z_e.view(), hidden.view())?;
        total += w_logits[x[t]] - logsumexp(w_logits.as_slice().expect("contiguous"));
        z_prev_e = z_e;
        x_prev_e = if dropped(dropout, t) {
            Array1::zeros(d)
        } else {
            theta.word_embed.row(x[t]).to_owned()
        };
        h_prev = hidden;
    }
    Ok(total)
}

/// `log p_θ(x, z̃)` for a relaxed state path: row `t` of `soft` is the
/// probability vector standing in for `z_t`.
pub fn joint_log_prob_soft(
    theta: &GenerativeParams,
    x: &[usize],
    soft: &Array2<f64>,
    dropout: Option<&[bool]>,
) -> Result<f64, VaeError> {
    check_words(theta, x)?;
    check_dropout(x.len(), dropout)?;
    if soft.dim() != (x.len(), theta.num_states()) {
        return Err(VaeError::BadInput(format!(
            "soft path is {:?}, expected ({}, {})",
            soft.dim(),
            x.len(),
            theta.num_states()
        )));
    }
    let (d, h) = (theta.embed_dim(), theta.hidden_dim());
    let mut z_prev_e = Array1::zeros(d);
    let mut x_prev_e = Array1::zeros(d);
    let mut h_prev = Array1::zeros(h);
    let mut total = 0.0;
    for t in 0..x.len() {
        let (hidden, s_logits) =
            decoder_step(theta, z_prev_e.view(), x_prev_e.view(), h_prev.view())?;
        let s_lse = logsumexp(s_logits.as_slice().expect("contiguous"));
        let s_ls = &s_logits - s_lse;
        total += soft.row(t).dot(&s_ls);
        let z_e = soft.row(t).dot(&theta.state_embed);
        let w_logits = word_logits(theta, z_e.view(), hidden.view())?;
        let w_lse = logsumexp(w_logits.as_slice().expect("contiguous"));
        total += w_logits[x[t]] - w_lse;
        z_prev_e = z_e;
        x_prev_e = if dropped(dropout, t) {
            Array1::zeros(d)
        } else {
            theta.word_embed.row(x[t]).to_owned()
        };
        h_prev = hidden;
    }
    Ok(total)
}

/// Decoder parameters as tape leaves, in one place so gradients can be read
/// back in the [`GenerativeParams`] flattening order.
#[derive(Debug, Clone, Copy)]
pub struct ThetaNodes {
    pub word_embed: NodeId,
    pub state_embed: NodeId,
    pub w_in: NodeId,
    pub w_hh: NodeId,
    pub b_h: NodeId,
    pub w_state: NodeId,
    pub b_state: NodeId,
    pub w_word: NodeId,
    pub b_word: NodeId,
}

impl ThetaNodes {
    pub fn leaves(tape: &mut Tape, theta: &GenerativeParams) -> Result<Self, VaeError> {
        theta.validate()?;
        Ok(ThetaNodes {
            word_embed: tape.leaf(theta.word_embed.clone().into_dyn())?,
            state_embed: tape.leaf(theta.state_embed.clone().into_dyn())?,
            w_in: tape.leaf(theta.w_in.clone().into_dyn())?,
            w_hh: tape.leaf(theta.w_hh.clone().into_dyn())?,
            b_h: tape.leaf(theta.b_h.clone().into_dyn())?,
            w_state: tape.leaf(theta.w_state.clone().into_dyn())?,
            b_state: tape.leaf(theta.b_state.clone().into_dyn())?,
            w_word: tape.leaf(theta.w_word.clone().into_dyn())?,
            b_word: tape.leaf(theta.b_word.clone().into_dyn())?,
        })
    }

    /// Appends the adjoints of every leaf to `out` in the flattening order;
    /// leaves the backward pass never reached contribute zeros.
    pub fn read_grads(&self, tape: &Tape, out: &mut Vec<f64>) {
        for node in [
            self.word_embed,
            self.state_embed,
            self.w_in,
            self.w_hh,
            self.b_h,
            self.w_state,
            self.b_state,
            self.w_word,
            self.b_word,
        ] {
            push_grad(tape, node, out);
        }
    }
}

pub(crate) fn push_grad(tape: &Tape, node: NodeId, out: &mut Vec<f64>) {
    match tape.grad(node) {
        Some(g) => out.extend(g.iter().copied()),
        None => out.extend(std::iter::repeat(0.0).take(tape.value(node).len())),
    }
}

/// Constant one-hot rows for a hard path, ready to feed [`record_joint`].
pub fn one_hot_rows(tape: &mut Tape, path: &[usize], num_states: usize) -> Vec<NodeId> {
    path.iter()
        .map(|&z| {
            let mut row = vec![0.0; num_states];
            row[z] = 1.0;
            tape.vector(&row)
        })
        .collect()
}

/// Records `log p_θ(x, z)` on the tape with per-position state rows
/// (one-hot constants, relaxed softmax rows, or straight-through wrappers).
///
/// Replays [`joint_log_prob_soft`] operation for operation, so the recorded
/// value matches the plain evaluation bitwise and the backward pass yields
/// gradients w.r.t. both the decoder leaves and the state rows.
pub fn record_joint(
    tape: &mut Tape,
    theta_nodes: &ThetaNodes,
    x: &[usize],
    z_rows: &[NodeId],
    dropout: Option<&[bool]>,
) -> Result<NodeId, VaeError> {
    if x.is_empty() {
        return Err(VaeError::BadInput("empty word sequence".into()));
    }
    if z_rows.len() != x.len() {
        return Err(VaeError::BadInput(format!(
            "{} state rows for {} words",
            z_rows.len(),
            x.len()
        )));
    }
    check_dropout(x.len(), dropout)?;
    let v = tape.value(theta_nodes.word_embed).shape()[0];
    let d = tape.value(theta_nodes.word_embed).shape()[1];
    let h = tape.value(theta_nodes.w_hh).shape()[0];
    if let Some(&w) = x.iter().find(|&&w| w >= v) {
        return Err(VaeError::BadInput(format!(
            "word id {w} out of range for vocabulary {v}"
        )));
    }
    let zero_d = tape.vector(&vec![0.0; d]);
    let zero_h = tape.vector(&vec![0.0; h]);
    let mut z_prev_e = zero_d;
    let mut x_prev_e = zero_d;
    let mut h_prev = zero_h;
    let mut acc = tape.scalar(0.0);
    for t in 0..x.len() {
        let input = tape.concat(z_prev_e, x_prev_e)?;
        let from_input = tape.matmul(theta_nodes.w_in, input)?;
        let from_hidden = tape.matmul(theta_nodes.w_hh, h_prev)?;
        let linear = tape.add(from_input, from_hidden)?;
        let pre = tape.add(linear, theta_nodes.b_h)?;
        let hidden = tape.tanh(pre)?;

        let s_raw = tape.matmul(theta_nodes.w_state, hidden)?;
        let s_logits = tape.add(s_raw, theta_nodes.b_state)?;
        let s_lse = tape.logsumexp_row(s_logits)?;
        let s_ls = tape.sub(s_logits, s_lse)?;
        let s_term = tape.matmul(z_rows[t], s_ls)?;
        acc = tape.add(acc, s_term)?;

        let z_e = tape.matmul(z_rows[t], theta_nodes.state_embed)?;
        let word_input = tape.concat(z_e, hidden)?;
        let w_raw = tape.matmul(theta_nodes.w_word, word_input)?;
        let w_logits = tape.add(w_raw, theta_nodes.b_word)?;
        let w_lse = tape.logsumexp_row(w_logits)?;
        let w_ls = tape.sub(w_logits, w_lse)?;
        let w_term = tape.gather(w_ls, x[t])?;
        acc = tape.add(acc, w_term)?;

        z_prev_e = z_e;
        x_prev_e = if dropped(dropout, t) {
            zero_d
        } else {
            tape.gather(theta_nodes.word_embed, x[t])?
        };
        h_prev = hidden;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use grad_engine::check::{finite_diff, max_rel_err};
    use ndarray::arr1;

    fn theta() -> GenerativeParams {
        GenerativeParams::seeded(5, 3, 2, 4, 0.4, 90)
    }

    fn zeroed(v: usize, k: usize, d: usize, h: usize) -> GenerativeParams {
        let mut t = GenerativeParams::seeded(v, k, d, h, 0.1, 0);
        let dim = t.dim();
        t.set_from_flat(&vec![0.0; dim]);
        t
    }

    #[test]
    fn zero_weights_give_uniform_heads() {
        let t = zeroed(4, 3, 2, 2);
        let (hidden, s_logits) = decoder_step(
            &t,
            arr1(&[0.5, -0.5]).view(),
            arr1(&[1.0, 2.0]).view(),
            arr1(&[0.3, 0.3]).view(),
        )
        .unwrap();
        assert!(hidden.iter().all(|&v| v == 0.0));
        assert!(s_logits.iter().all(|&v| v == 0.0));

        // T = 1: log(1/K) + log(1/V).
        let lp = joint_log_prob_hard(&t, &[2], &[1], None).unwrap();
        let expect = -(3.0_f64.ln()) - 4.0_f64.ln();
        assert!((lp - expect).abs() < 1e-12, "{lp} vs {expect}");
    }

    #[test]
    fn one_dimensional_step_matches_the_closed_form() {
        let mut t = zeroed(2, 2, 1, 1);
        t.w_in[[0, 0]] = 0.7;
        t.w_in[[0, 1]] = -0.4;
        t.w_hh[[0, 0]] = 0.2;
        t.b_h[0] = 0.1;
        t.w_state[[0, 0]] = 1.5;
        t.w_state[[1, 0]] = -0.5;
        t.b_state[0] = 0.05;

        let (ze, xe, hp) = (0.3, -0.8, 0.6);
        let (hidden, s_logits) =
            decoder_step(&t, arr1(&[ze]).view(), arr1(&[xe]).view(), arr1(&[hp]).view()).unwrap();
        let expect_h = f64::tanh(0.7 * ze + -0.4 * xe + 0.2 * hp + 0.1);
        assert!((hidden[0] - expect_h).abs() < 1e-15);
        assert!((s_logits[0] - (1.5 * expect_h + 0.05)).abs() < 1e-15);
        assert!((s_logits[1] - (-0.5 * expect_h)).abs() < 1e-15);
    }

    #[test]
    fn recorded_joint_replays_the_hard_evaluation_bitwise() {
        let t = theta();
        let x = [0usize, 3, 1, 4];
        let z = [2usize, 0, 1, 1];
        let plain = joint_log_prob_hard(&t, &x, &z, None).unwrap();

        let mut tape = Tape::new();
        let nodes = ThetaNodes::leaves(&mut tape, &t).unwrap();
        let rows = one_hot_rows(&mut tape, &z, t.num_states());
        let lp = record_joint(&mut tape, &nodes, &x, &rows, None).unwrap();
        assert_eq!(tape.value_scalar(lp).to_bits(), plain.to_bits());
    }

    #[test]
    fn recorded_joint_replays_the_soft_evaluation_bitwise() {
        let t = theta();
        let x = [1usize, 2, 0];
        // Arbitrary probability rows, not one-hot.
        let soft = ndarray::arr2(&[[0.2, 0.5, 0.3], [0.9, 0.05, 0.05], [0.1, 0.1, 0.8]]);
        let plain = joint_log_prob_soft(&t, &x, &soft, None).unwrap();

        let mut tape = Tape::new();
        let nodes = ThetaNodes::leaves(&mut tape, &t).unwrap();
        let rows: Vec<_> = (0..x.len())
            .map(|i| tape.vector(soft.row(i).as_slice().unwrap()))
            .collect();
        let lp = record_joint(&mut tape, &nodes, &x, &rows, None).unwrap();
        assert_eq!(tape.value_scalar(lp).to_bits(), plain.to_bits());
    }

    #[test]
    fn one_hot_soft_input_collapses_to_the_hard_evaluation() {
        let t = theta();
        let x = [4usize, 0, 2, 2, 1];
        let z = [0usize, 2, 1, 0, 2];
        let mut soft = Array2::zeros((x.len(), t.num_states()));
        for (t_pos, &s) in z.iter().enumerate() {
            soft[[t_pos, s]] = 1.0;
        }
        let hard = joint_log_prob_hard(&t, &x, &z, None).unwrap();
        let relaxed = joint_log_prob_soft(&t, &x, &soft, None).unwrap();
        assert_eq!(hard.to_bits(), relaxed.to_bits());
    }

    #[test]
    fn joint_is_normalized_over_all_sequences() {
        // K = 2, V = 3, T = 2: the autoregressive factorization must sum to
        // one over every (x, z) pair — 36 terms.
        let t = GenerativeParams::seeded(3, 2, 2, 3, 0.6, 17);
        let mut total = 0.0;
        for x0 in 0..3 {
            for x1 in 0..3 {
                for z0 in 0..2 {
                    for z1 in 0..2 {
                        total +=
                            joint_log_prob_hard(&t, &[x0, x1], &[z0, z1], None).unwrap().exp();
                    }
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-12, "sums to {total}");
    }

    #[test]
    fn recorded_gradient_matches_finite_differences() {
        let t = theta();
        let x = [3usize, 1, 0];
        let z = [1usize, 2, 0];

        let mut tape = Tape::new();
        let nodes = ThetaNodes::leaves(&mut tape, &t).unwrap();
        let rows = one_hot_rows(&mut tape, &z, t.num_states());
        let lp = record_joint(&mut tape, &nodes, &x, &rows, None).unwrap();
        tape.backward(lp).unwrap();
        let mut grad = Vec::new();
        nodes.read_grads(&tape, &mut grad);

        let mut probe = t.clone();
        let mut value_at = |flat: &[f64]| {
            probe.set_from_flat(flat);
            joint_log_prob_hard(&probe, &x, &z, None).unwrap()
        };
        let fd = finite_diff(&mut value_at, &t.to_flat(), 1e-5);
        assert!(max_rel_err(&grad, &fd) < 1e-6, "{}", max_rel_err(&grad, &fd));
    }

    #[test]
    fn word_dropout_zeroes_exactly_the_input_embedding() {
        let t = theta();
        let x = [2usize, 4, 1];
        let z = [0usize, 1, 2];
        // Dropping every input word must equal running with a zeroed word
        // embedding table: that table feeds nothing but the inputs.
        let mut no_words = t.clone();
        no_words.word_embed.fill(0.0);
        let dropped_all = joint_log_prob_hard(&t, &x, &z, Some(&[true, true, true])).unwrap();
        let zeroed_table = joint_log_prob_hard(&no_words, &x, &z, None).unwrap();
        assert_eq!(dropped_all.to_bits(), zeroed_table.to_bits());

        // A dropped position stops gradient flow into its embedding row.
        let mut tape = Tape::new();
        let nodes = ThetaNodes::leaves(&mut tape, &t).unwrap();
        let rows = one_hot_rows(&mut tape, &z, t.num_states());
        let mask = [true, false, true];
        let lp = record_joint(&mut tape, &nodes, &x, &rows, Some(&mask)).unwrap();
        tape.backward(lp).unwrap();
        let g = tape.grad(nodes.word_embed).unwrap();
        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert!(g2.row(x[0]).iter().all(|&v| v == 0.0), "x[0] was dropped");
        assert!(g2.row(x[1]).iter().any(|&v| v != 0.0), "x[1] was kept");
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let t = theta();
        assert!(matches!(
            joint_log_prob_hard(&t, &[], &[], None),
            Err(VaeError::BadInput(_))
        ));
        assert!(matches!(
            joint_log_prob_hard(&t, &[0, 1], &[0], None),
            Err(VaeError::BadInput(_))
        ));
        assert!(matches!(
            joint_log_prob_hard(&t, &[9], &[0], None),
            Err(VaeError::BadInput(_))
        ));
        assert!(matches!(
            joint_log_prob_hard(&t, &[0], &[7], None),
            Err(VaeError::BadInput(_))
        ));
        assert!(matches!(
            joint_log_prob_hard(&t, &[0, 1], &[0, 1], Some(&[true])),
            Err(VaeError::BadInput(_))
        ));
    }
}
