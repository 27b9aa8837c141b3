//! Tape recorders for the chain recursions.
//!
//! Each recorder replays one of the value-level algorithms
//! (forward filtering, Gumbelized backward sampling, relaxed Viterbi, the
//! entropy recursion, path scoring) as tape operations. The arithmetic is
//! arranged so intermediate *values* match the value-level implementations
//! bit for bit where coupling matters — in particular the hard paths chosen
//! by the recorded samplers coincide with the value-level samplers under
//! the same noise block. Gradients then come for free from
//! [`grad_engine::Tape::backward`].
//!
//! Recorders require fully finite tables: `-inf` cells are a value-level
//! convenience that the differentiable path does not support.

use crate::EstimatorError;
use crf_core::logspace::argmax;
use crf_core::{HardPath, PotentialTable};
use grad_engine::{NodeId, Tape};
use structured_sampling::{FfbsNoise, PerturbNoise};

/// The potential tables as differentiable tape leaves.
#[derive(Debug, Clone, Copy)]
pub struct TapePotentials {
    /// `(K, K)` transition block.
    pub transition: NodeId,
    /// `(T, K)` emission block.
    pub emission: NodeId,
    /// `(K,)` initial vector.
    pub initial: NodeId,
    pub num_states: usize,
    pub seq_len: usize,
}

/// Documents the flattening layout shared by every gradient vector in this
/// crate: the transition block row-major, then the emission block row-major,
/// then the initial vector.
pub fn flatten_order() -> &'static str {
    "transition (K*K, row-major) ++ emission (T*K, row-major) ++ initial (K)"
}

/// Dimension of the flattened parameter vector.
pub fn param_dim(num_states: usize, seq_len: usize) -> usize {
    num_states * num_states + seq_len * num_states + num_states
}

/// Creates differentiable leaves for all three tables. Fails on `-inf`
/// entries (see module docs).
pub fn leaf_potentials(
    tape: &mut Tape,
    table: &PotentialTable,
) -> Result<TapePotentials, EstimatorError> {
    let finite = table.log_transition().iter().all(|v| v.is_finite())
        && table.log_emission().iter().all(|v| v.is_finite())
        && table.log_initial().iter().all(|v| v.is_finite());
    if !finite {
        return Err(EstimatorError::NonFiniteTable("tape recording"));
    }
    Ok(TapePotentials {
        transition: tape.leaf(table.log_transition().clone().into_dyn())?,
        emission: tape.leaf(table.log_emission().clone().into_dyn())?,
        initial: tape.leaf(ndarray::Array1::from(table.log_initial().to_vec()).into_dyn())?,
        num_states: table.num_states(),
        seq_len: table.seq_len(),
    })
}

/// Reads the adjoints of the three leaves into one flat vector in
/// [`flatten_order`] layout. Call after `tape.backward`.
pub fn flatten_grads(tape: &Tape, pots: &TapePotentials) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_dim(pots.num_states, pots.seq_len));
    for id in [pots.transition, pots.emission, pots.initial] {
        out.extend(
            tape.grad(id)
                .expect("backward must run before flatten_grads")
                .iter()
                .copied(),
        );
    }
    out
}

/// Rebuilds a table from a flat vector in [`flatten_order`] layout —
/// the inverse used by finite-difference probes.
pub fn table_from_flat(
    flat: &[f64],
    num_states: usize,
    seq_len: usize,
) -> Result<PotentialTable, EstimatorError> {
    let (k, t) = (num_states, seq_len);
    if flat.len() != param_dim(k, t) {
        return Err(EstimatorError::BadOptions(format!(
            "flat vector has {} entries, expected {}",
            flat.len(),
            param_dim(k, t)
        )));
    }
    let trans = ndarray::Array2::from_shape_vec((k, k), flat[..k * k].to_vec()).unwrap();
    let emis =
        ndarray::Array2::from_shape_vec((t, k), flat[k * k..k * k + t * k].to_vec()).unwrap();
    let init = flat[k * k + t * k..].to_vec();
    Ok(PotentialTable::new(trans, emis, init)?)
}

/// Flattens a table's entries in [`flatten_order`] layout.
pub fn table_to_flat(table: &PotentialTable) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_dim(table.num_states(), table.seq_len()));
    out.extend(table.log_transition().iter().copied());
    out.extend(table.log_emission().iter().copied());
    out.extend(table.log_initial().iter().copied());
    out
}

/// The forward recursion recorded on the tape.
#[derive(Debug, Clone)]
pub struct TapeTrellis {
    /// One `(K,)` node per position: `rows[t] = log alpha_t`.
    pub rows: Vec<NodeId>,
    /// Scalar `log Z` node.
    pub log_z: NodeId,
}

/// Records forward filtering. The recursion is phrased so each produced
/// value is bitwise the value-level `forward` result: `logsumexp` rows over
/// `transition^T + alpha` broadcast, plus the emission row.
pub fn record_forward(
    tape: &mut Tape,
    pots: &TapePotentials,
) -> Result<TapeTrellis, EstimatorError> {
    let t_len = pots.seq_len;
    let trans_t = tape.transpose(pots.transition)?;
    let emis0 = tape.gather(pots.emission, 0)?;
    let mut rows = Vec::with_capacity(t_len);
    rows.push(tape.add(pots.initial, emis0)?);
    for t in 1..t_len {
        // cand[j][i] = transition[i][j] + alpha[t-1][i]
        let cand = tape.add(trans_t, rows[t - 1])?;
        let lse = tape.logsumexp_row(cand)?;
        let emis_t = tape.gather(pots.emission, t)?;
        rows.push(tape.add(lse, emis_t)?);
    }
    let log_z = tape.logsumexp_row(rows[t_len - 1])?;
    Ok(TapeTrellis { rows, log_z })
}

/// Records the normalized log probability of one hard path:
/// `initial[z_0] + sum emissions + sum transitions - log Z`.
pub fn record_path_log_prob(
    tape: &mut Tape,
    pots: &TapePotentials,
    trellis: &TapeTrellis,
    path: &[usize],
) -> Result<NodeId, EstimatorError> {
    let score = record_path_score(tape, pots, path)?;
    Ok(tape.sub(score, trellis.log_z)?)
}

/// Records the unnormalized path score.
pub fn record_path_score(
    tape: &mut Tape,
    pots: &TapePotentials,
    path: &[usize],
) -> Result<NodeId, EstimatorError> {
    assert_eq!(path.len(), pots.seq_len, "path length mismatch");
    let init = tape.gather(pots.initial, path[0])?;
    let e0_row = tape.gather(pots.emission, 0)?;
    let e0 = tape.gather(e0_row, path[0])?;
    let mut acc = tape.add(init, e0)?;
    for t in 1..path.len() {
        let trans_row = tape.gather(pots.transition, path[t - 1])?;
        let tr = tape.gather(trans_row, path[t])?;
        let em_row = tape.gather(pots.emission, t)?;
        let em = tape.gather(em_row, path[t])?;
        let step = tape.add(tr, em)?;
        acc = tape.add(acc, step)?;
    }
    Ok(acc)
}

/// A relaxed sample recorded on the tape: per-position soft rows (tape
/// nodes) plus the coupled hard path (plain values).
#[derive(Debug, Clone)]
pub struct RelaxedTapePath {
    pub hard: HardPath,
    pub soft_rows: Vec<NodeId>,
    pub tau: f64,
}

/// Records a Gumbelized backward-sampling pass against pre-drawn noise.
///
/// Mirrors `structured_sampling::gumbelized_ffbs_with_noise` exactly: same
/// weights, same noise layout, same softmax kernel — so the hard path
/// equals the value-level sampler's draw for the same noise block, and the
/// soft rows are differentiable w.r.t. the potentials through the recorded
/// forward trellis.
pub fn record_gumbelized_ffbs(
    tape: &mut Tape,
    pots: &TapePotentials,
    trellis: &TapeTrellis,
    noise: &FfbsNoise,
    tau: f64,
) -> Result<RelaxedTapePath, EstimatorError> {
    if !(tau > 0.0) {
        return Err(EstimatorError::BadOptions(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let t_len = pots.seq_len;
    if noise.seq_len() != t_len || noise.num_states() != pots.num_states {
        return Err(EstimatorError::BadOptions(format!(
            "noise block is ({}, {}), table is ({t_len}, {})",
            noise.seq_len(),
            noise.num_states(),
            pots.num_states
        )));
    }
    let trans_t = tape.transpose(pots.transition)?;
    let mut hard = vec![0usize; t_len];
    let mut soft_rows = vec![trellis.log_z; t_len]; // placeholder, overwritten
    for t in (0..t_len).rev() {
        let weights = if t + 1 < t_len {
            // alpha[t][i] + transition[i][hard[t+1]]
            let tcol = tape.gather(trans_t, hard[t + 1])?;
            tape.add(trellis.rows[t], tcol)?
        } else {
            trellis.rows[t]
        };
        let g = tape.vector(noise.at(t));
        let perturbed = tape.add(weights, g)?;
        let soft = tape.softmax(perturbed, tau)?;
        let row: Vec<f64> = tape.value(soft).iter().copied().collect();
        hard[t] = argmax(&row);
        soft_rows[t] = soft;
    }
    Ok(RelaxedTapePath {
        hard,
        soft_rows,
        tau,
    })
}

/// Adds a pre-drawn perturbation block to the emission (and optionally
/// transition) leaves on the tape, mirroring
/// `structured_sampling::perturb_table`.
pub fn perturb_on_tape(
    tape: &mut Tape,
    pots: &TapePotentials,
    noise: &PerturbNoise,
) -> Result<TapePotentials, EstimatorError> {
    if noise.seq_len() != pots.seq_len || noise.num_states() != pots.num_states {
        return Err(EstimatorError::BadOptions(format!(
            "perturbation block is ({}, {}), table is ({}, {})",
            noise.seq_len(),
            noise.num_states(),
            pots.seq_len,
            pots.num_states
        )));
    }
    let mut gm = ndarray::Array2::zeros((pots.seq_len, pots.num_states));
    for t in 0..pots.seq_len {
        for (j, &g) in noise.emission_at(t).iter().enumerate() {
            gm[[t, j]] = g;
        }
    }
    let noise_node = tape.matrix(&gm);
    let emission = tape.add(pots.emission, noise_node)?;
    let transition = match noise.transition_rows() {
        None => pots.transition,
        Some(rows) => {
            let mut tm = ndarray::Array2::zeros((pots.num_states, pots.num_states));
            for (i, row) in rows.iter().enumerate() {
                for (j, &g) in row.iter().enumerate() {
                    tm[[i, j]] = g;
                }
            }
            let tnode = tape.matrix(&tm);
            tape.add(pots.transition, tnode)?
        }
    };
    Ok(TapePotentials {
        transition,
        emission,
        initial: pots.initial,
        num_states: pots.num_states,
        seq_len: pots.seq_len,
    })
}

/// Records relaxed Viterbi decoding: hard max recursion, tempered-softmax
/// back-pointers, hard backtracking. Mirrors
/// `structured_sampling::relaxed_viterbi` (on the same — typically
/// perturbed — table) so the hard path is the plain Viterbi path.
pub fn record_relaxed_viterbi(
    tape: &mut Tape,
    pots: &TapePotentials,
    tau: f64,
) -> Result<RelaxedTapePath, EstimatorError> {
    if !(tau > 0.0) {
        return Err(EstimatorError::BadOptions(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let t_len = pots.seq_len;
    let trans_t = tape.transpose(pots.transition)?;
    let emis0 = tape.gather(pots.emission, 0)?;
    let mut score = tape.add(pots.initial, emis0)?;
    let mut backs: Vec<NodeId> = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 1..t_len {
        // cand[i][j] = transition[j][i] + score[j]
        let cand = tape.add(trans_t, score)?;
        let m = tape.max_row(cand)?;
        let emis_t = tape.gather(pots.emission, t)?;
        score = tape.add(m, emis_t)?;
        backs.push(tape.softmax(cand, tau)?);
    }
    let mut hard = vec![0usize; t_len];
    let mut soft_rows = vec![score; t_len]; // placeholder, overwritten
    let last_soft = tape.softmax(score, tau)?;
    let last_row: Vec<f64> = tape.value(last_soft).iter().copied().collect();
    hard[t_len - 1] = argmax(&last_row);
    soft_rows[t_len - 1] = last_soft;
    for t in (0..t_len.saturating_sub(1)).rev() {
        let row_node = tape.gather(backs[t], hard[t + 1])?;
        let row: Vec<f64> = tape.value(row_node).iter().copied().collect();
        hard[t] = argmax(&row);
        soft_rows[t] = row_node;
    }
    Ok(RelaxedTapePath {
        hard,
        soft_rows,
        tau,
    })
}

/// Records the exact-entropy recursion of the recorded trellis. Returns a
/// scalar node whose value equals `crf_core::entropy` (up to summation
/// order) and which is differentiable w.r.t. the potentials.
pub fn record_entropy(
    tape: &mut Tape,
    pots: &TapePotentials,
    trellis: &TapeTrellis,
) -> Result<NodeId, EstimatorError> {
    let (k, t_len) = (pots.num_states, pots.seq_len);
    let trans_t = tape.transpose(pots.transition)?;
    let mut cond = tape.vector(&vec![0.0; k]);
    let ones = tape.vector(&vec![1.0; k]);
    for t in 1..t_len {
        // log_w[i][j] = alpha[t-1][i] + transition[i][j] + emission[t][j]
        //              - alpha[t][j]
        let c = tape.add(trans_t, trellis.rows[t - 1])?; // [j][i]
        let c = tape.transpose(c)?; // [i][j]
        let emis_t = tape.gather(pots.emission, t)?;
        let shift = tape.sub(emis_t, trellis.rows[t])?; // (K,) over j
        let log_w = tape.add(c, shift)?;
        let w = tape.exp(log_w)?;
        // m[i][j] = cond[i] - log_w[i][j], built through transposes because
        // broadcasts are row-wise only.
        let lw_t = tape.transpose(log_w)?; // [j][i]
        let diff_t = tape.sub(lw_t, cond)?; // [j][i] = log_w - cond
        let diff = tape.transpose(diff_t)?;
        let m = tape.scale(diff, -1.0)?; // [i][j] = cond - log_w
        let contrib = tape.mul(w, m)?;
        cond = tape.matmul(ones, contrib)?; // column sums -> (K,) over j
    }
    let log_p = tape.sub(trellis.rows[t_len - 1], trellis.log_z)?;
    let p = tape.exp(log_p)?;
    let inner = tape.sub(cond, log_p)?;
    let terms = tape.mul(p, inner)?;
    Ok(tape.sum(terms)?)
}
