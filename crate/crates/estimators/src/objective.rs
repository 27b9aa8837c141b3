use grad_engine::{GradError, NodeId, Tape};
use ndarray::Array2;

/// A downstream functional of one state sequence.
///
/// Estimators evaluate it two ways: on hard paths ([`Objective::eval_hard`])
/// and on relaxed samples, where each position carries a soft assignment row
/// and the objective is recorded on the tape so gradients can flow through
/// it ([`Objective::record_soft`]). Implementations must agree on the
/// overlap: recording against exact one-hot rows must reproduce
/// `eval_hard` of the corresponding path.
pub trait Objective {
    /// Number of states the objective expects.
    fn num_states(&self) -> usize;

    /// Value on a hard path.
    fn eval_hard(&self, path: &[usize]) -> f64;

    /// Whether the objective is defined on soft assignments at all.
    fn accepts_soft(&self) -> bool {
        true
    }

    /// Records the value on `tape` given one soft assignment row (length
    /// `K`, on the tape) per position.
    fn record_soft(&self, tape: &mut Tape, rows: &[NodeId]) -> Result<NodeId, GradError>;
}

/// `f(z) = sum_t weights[t][z_t]` — linear in the per-position assignments,
/// so its relaxation is exact in expectation.
#[derive(Debug, Clone)]
pub struct LinearObjective {
    /// `(T, K)` weight table.
    pub weights: Array2<f64>,
}

impl Objective for LinearObjective {
    fn num_states(&self) -> usize {
        self.weights.ncols()
    }

    fn eval_hard(&self, path: &[usize]) -> f64 {
        debug_assert_eq!(path.len(), self.weights.nrows());
        path.iter()
            .enumerate()
            .map(|(t, &z)| self.weights[[t, z]])
            .sum()
    }

    fn record_soft(&self, tape: &mut Tape, rows: &[NodeId]) -> Result<NodeId, GradError> {
        debug_assert_eq!(rows.len(), self.weights.nrows());
        let mut acc = tape.scalar(0.0);
        for (t, &row) in rows.iter().enumerate() {
            let w = tape.vector(&self.weights.row(t).to_vec());
            let dot = tape.matmul(row, w)?;
            acc = tape.add(acc, dot)?;
        }
        Ok(acc)
    }
}

/// `f(z) = sum_t pair[z_t][z_{t+1}]` — a bilinear interaction between
/// adjacent positions. Its relaxation is *not* exact (a product of
/// expectations is not the expectation of the product), which makes it the
/// interesting test case for relaxed estimators.
#[derive(Debug, Clone)]
pub struct AdjacentPairObjective {
    /// `(K, K)` interaction table.
    pub pair: Array2<f64>,
}

impl Objective for AdjacentPairObjective {
    fn num_states(&self) -> usize {
        self.pair.nrows()
    }

    fn eval_hard(&self, path: &[usize]) -> f64 {
        path.windows(2).map(|w| self.pair[[w[0], w[1]]]).sum()
    }

    fn record_soft(&self, tape: &mut Tape, rows: &[NodeId]) -> Result<NodeId, GradError> {
        let q = tape.matrix(&self.pair);
        let mut acc = tape.scalar(0.0);
        for w in rows.windows(2) {
            let right = tape.matmul(q, w[1])?; // (K,)
            let bilinear = tape.matmul(w[0], right)?; // scalar
            acc = tape.add(acc, bilinear)?;
        }
        Ok(acc)
    }
}

/// Constant objective: `f(z) = c` for every path. The exact gradient of its
/// expectation is identically zero, which exercises the degenerate branches
/// of the variance diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct ConstantObjective {
    pub value: f64,
    pub num_states: usize,
}

impl Objective for ConstantObjective {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn eval_hard(&self, _path: &[usize]) -> f64 {
        self.value
    }

    fn record_soft(&self, tape: &mut Tape, _rows: &[NodeId]) -> Result<NodeId, GradError> {
        Ok(tape.scalar(self.value))
    }
}
