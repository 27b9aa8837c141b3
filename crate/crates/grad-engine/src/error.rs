use thiserror::Error;

/// Errors raised while building or differentiating a tape.
#[derive(Debug, Error)]
pub enum GradError {
    /// Operand shapes neither match nor fit a supported broadcast.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// The operation does not support an operand of this rank or size.
    #[error("{op}: unsupported operand shape {shape:?}")]
    BadOperand { op: &'static str, shape: Vec<usize> },

    /// Row or element index outside the operand.
    #[error("{op}: index {index} out of bounds for shape {shape:?}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },

    /// A `NodeId` from a different tape was used.
    #[error("node belongs to a different tape")]
    ForeignNode,

    /// `backward` requires a scalar (rank-0) loss node.
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// `log` of a non-positive value has no usable gradient.
    #[error("log: operand contains a non-positive entry ({value})")]
    NonPositiveLog { value: f64 },

    /// Softmax temperature must be strictly positive.
    #[error("softmax: temperature must be positive, got {0}")]
    BadTemperature(f64),
}
