use crate::logspace::logsumexp;
use crate::PotentialTable;
use ndarray::Array2;

/// Forward messages `log_alpha[t][j] = log sum over prefixes ending in state
/// j at position t of exp(prefix score)`, plus the normalizer.
#[derive(Debug, Clone)]
pub struct ForwardTrellis {
    pub log_alpha: Array2<f64>,
    pub log_z: f64,
}

/// Backward messages `log_beta[t][i] = log sum over suffixes starting from
/// state i at position t of exp(suffix score)`; the position-`t` emission is
/// not included in `log_beta[t]`.
#[derive(Debug, Clone)]
pub struct BackwardTrellis {
    pub log_beta: Array2<f64>,
    pub log_z: f64,
}

/// Runs the forward recursion in log space.
///
/// `log_alpha[0][j] = log_initial[j] + log_emission[0][j]`, then
/// `log_alpha[t][j] = logsumexp_i(log_alpha[t-1][i] + log_transition[i][j]) +
/// log_emission[t][j]`. `log_z` is the logsumexp of the final row; it is
/// `-inf` when every path is forbidden.
pub fn forward(table: &PotentialTable) -> ForwardTrellis {
    let (k, t_len) = (table.num_states(), table.seq_len());
    let trans = table.log_transition();
    let emis = table.log_emission();
    let mut log_alpha = Array2::zeros((t_len, k));
    for j in 0..k {
        log_alpha[[0, j]] = table.log_initial()[j] + emis[[0, j]];
    }
    let mut buf = vec![0.0; k];
    for t in 1..t_len {
        for j in 0..k {
            for i in 0..k {
                buf[i] = log_alpha[[t - 1, i]] + trans[[i, j]];
            }
            log_alpha[[t, j]] = logsumexp(&buf) + emis[[t, j]];
        }
    }
    let last: Vec<f64> = log_alpha.row(t_len - 1).to_vec();
    ForwardTrellis {
        log_z: logsumexp(&last),
        log_alpha,
    }
}

/// Runs the backward recursion in log space.
///
/// `log_beta[T-1][i] = 0`, then `log_beta[t][i] =
/// logsumexp_j(log_transition[i][j] + log_emission[t+1][j] +
/// log_beta[t+1][j])`. The returned `log_z` recombines position 0 and must
/// match [`forward`]'s.
pub fn backward(table: &PotentialTable) -> BackwardTrellis {
    let (k, t_len) = (table.num_states(), table.seq_len());
    let trans = table.log_transition();
    let emis = table.log_emission();
    let mut log_beta = Array2::zeros((t_len, k));
    for i in 0..k {
        log_beta[[t_len - 1, i]] = 0.0;
    }
    let mut buf = vec![0.0; k];
    for t in (0..t_len - 1).rev() {
        for i in 0..k {
            for j in 0..k {
                buf[j] = trans[[i, j]] + emis[[t + 1, j]] + log_beta[[t + 1, j]];
            }
            log_beta[[t, i]] = logsumexp(&buf);
        }
    }
    for j in 0..k {
        buf[j] = table.log_initial()[j] + emis[[0, j]] + log_beta[[0, j]];
    }
    BackwardTrellis {
        log_z: logsumexp(&buf),
        log_beta,
    }
}
