//! A deliberately small reverse-mode automatic-differentiation tape.
//!
//! Values are dense `f64` arrays of rank 0 (scalars), 1 (vectors), or
//! 2 (matrices). Operations append nodes to an append-only [`Tape`]; node
//! order is therefore already topological, and [`Tape::backward`] is a
//! single reverse sweep that accumulates adjoints additively.
//!
//! The op set is the minimum needed to record log-space chain recursions
//! (`logsumexp_row`, `max_row`, tempered `softmax`, `gather`) and a small
//! tanh decoder (`matmul`, `concat`, elementwise arithmetic), plus a
//! [`Tape::straight_through`] node that forwards a hard value while routing
//! gradient to its relaxed surrogate. Softmax and the log-space reductions
//! call the same numeric kernels as the value-level inference code
//! (`crf_core::logspace`), so a recursion recorded on the tape reproduces
//! the value-level result bit for bit.
//!
//! Gradient correctness is checked against central finite differences; see
//! [`check::finite_diff`].

pub mod check;
mod error;
mod tape;

pub use error::GradError;
pub use tape::{NodeId, Tape};
