use crate::logspace::argmax;
use crate::{CrfError, ForwardTrellis, HardPath, PotentialTable};
use ndarray::Array2;

/// Unnormalized log score of one path: initial + emissions + transitions.
/// `-inf` means the path is forbidden.
pub fn path_score(table: &PotentialTable, path: &[usize]) -> Result<f64, CrfError> {
    table.check_path(path)?;
    let emis = table.log_emission();
    let trans = table.log_transition();
    let mut s = table.log_initial()[path[0]] + emis[[0, path[0]]];
    for t in 1..path.len() {
        s += trans[[path[t - 1], path[t]]] + emis[[t, path[t]]];
    }
    Ok(s)
}

/// Normalized log probability `path_score - log_z`, with `log_z` taken from
/// a forward trellis computed on the same table.
pub fn path_log_prob(
    table: &PotentialTable,
    trellis: &ForwardTrellis,
    path: &[usize],
) -> Result<f64, CrfError> {
    if trellis.log_alpha.dim() != (table.seq_len(), table.num_states()) {
        return Err(CrfError::BadShape(
            "forward trellis does not match table dimensions".into(),
        ));
    }
    if trellis.log_z == f64::NEG_INFINITY {
        return Err(CrfError::AllPathsForbidden);
    }
    Ok(path_score(table, path)? - trellis.log_z)
}

/// Posterior position marginals `out[t][j] = p(z_t = j)`, via the
/// forward-backward identity `alpha[t][j] + beta[t][j] - log_z`.
pub fn marginals(table: &PotentialTable) -> Result<Array2<f64>, CrfError> {
    let fwd = crate::forward(table);
    if fwd.log_z == f64::NEG_INFINITY {
        return Err(CrfError::AllPathsForbidden);
    }
    let bwd = crate::backward(table);
    let (t_len, k) = fwd.log_alpha.dim();
    let mut out = Array2::zeros((t_len, k));
    for t in 0..t_len {
        for j in 0..k {
            out[[t, j]] = (fwd.log_alpha[[t, j]] + bwd.log_beta[[t, j]] - fwd.log_z).exp();
        }
    }
    Ok(out)
}

/// Exact Shannon entropy (in nats) of the normalized path distribution,
/// computed by dynamic programming in one forward sweep.
///
/// `cond[j]` carries the entropy of the prefix distribution conditioned on
/// the prefix ending in state `j`; the recursion pushes it forward through
/// the normalized step posteriors `w[i][j] = p(z_{t-1} = i | z_t = j, prefix
/// weights)`:
///
/// ```text
/// cond'[j] = sum_i w[i][j] * (cond[i] - ln w[i][j])
/// ```
///
/// and finishes by mixing over the final-state posterior. Unreachable states
/// (`alpha = -inf`) contribute nothing and their conditional entropy is
/// pinned to 0 to keep `-inf - -inf` out of the arithmetic.
pub fn entropy(table: &PotentialTable) -> Result<f64, CrfError> {
    let fwd = crate::forward(table);
    if fwd.log_z == f64::NEG_INFINITY {
        return Err(CrfError::AllPathsForbidden);
    }
    let (t_len, k) = fwd.log_alpha.dim();
    let trans = table.log_transition();
    let emis = table.log_emission();
    let mut cond = vec![0.0; k];
    let mut next = vec![0.0; k];
    for t in 1..t_len {
        for j in 0..k {
            if fwd.log_alpha[[t, j]] == f64::NEG_INFINITY {
                next[j] = 0.0;
                continue;
            }
            let mut h = 0.0;
            for i in 0..k {
                let log_w =
                    fwd.log_alpha[[t - 1, i]] + trans[[i, j]] + emis[[t, j]] - fwd.log_alpha[[t, j]];
                let w = log_w.exp();
                if w > 0.0 {
                    h += w * (cond[i] - log_w);
                }
            }
            next[j] = h;
        }
        std::mem::swap(&mut cond, &mut next);
    }
    let mut h = 0.0;
    for j in 0..k {
        let log_p = fwd.log_alpha[[t_len - 1, j]] - fwd.log_z;
        let p = log_p.exp();
        if p > 0.0 {
            h += p * (cond[j] - log_p);
        }
    }
    Ok(h)
}

/// Highest-scoring path, ties broken toward lower state indices at every
/// position (both in the max recursion and in backtracking).
pub fn viterbi(table: &PotentialTable) -> Result<HardPath, CrfError> {
    let (k, t_len) = (table.num_states(), table.seq_len());
    let trans = table.log_transition();
    let emis = table.log_emission();
    let mut score: Vec<f64> = (0..k)
        .map(|j| table.log_initial()[j] + emis[[0, j]])
        .collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(t_len.saturating_sub(1));
    let mut cand = vec![0.0; k];
    for t in 1..t_len {
        let mut next = vec![0.0; k];
        let mut ptr = vec![0; k];
        for j in 0..k {
            for i in 0..k {
                cand[i] = score[i] + trans[[i, j]];
            }
            let best = argmax(&cand);
            ptr[j] = best;
            next[j] = cand[best] + emis[[t, j]];
        }
        back.push(ptr);
        score = next;
    }
    let last = argmax(&score);
    if score[last] == f64::NEG_INFINITY {
        return Err(CrfError::AllPathsForbidden);
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = last;
    for t in (0..t_len - 1).rev() {
        path[t] = back[t][path[t + 1]];
    }
    Ok(path)
}
