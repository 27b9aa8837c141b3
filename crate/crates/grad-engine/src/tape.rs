use crate::GradError;
use crf_core::logspace;
use ndarray::{Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};
use std::sync::atomic::{AtomicU32, Ordering};

static TAPE_COUNTER: AtomicU32 = AtomicU32::new(0);

/// Handle to a node on one specific [`Tape`]. Using it on another tape is
/// reported as [`GradError::ForeignNode`] rather than silently mixing
/// graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u32,
    index: u32,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    MatMul(u32, u32),
    Gather(u32, usize),
    Concat(u32, u32),
    Tanh(u32),
    Log(u32),
    Exp(u32),
    /// Tempered softmax, row-wise on matrices.
    Softmax(u32, f64),
    LogSumExpRow(u32),
    MaxRow(u32),
    Sum(u32),
    Mean(u32),
    Scale(u32, f64),
    Transpose(u32),
    /// Forwards `hard`'s value; backward routes everything to `soft`.
    StraightThrough { soft: u32 },
}

#[derive(Debug)]
struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
}

/// Append-only computation record. Node indices are created in topological
/// order, so the backward pass is one reverse sweep.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, id: NodeId) -> Result<usize, GradError> {
        if id.tape != self.id {
            return Err(GradError::ForeignNode);
        }
        debug_assert!((id.index as usize) < self.nodes.len());
        Ok(id.index as usize)
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        debug_assert!(value.iter().all(|v| !v.is_nan()), "NaN entered the tape");
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId {
            tape: self.id,
            index,
        }
    }

    /// Differentiable input. Rank must be at most 2.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Result<NodeId, GradError> {
        if value.ndim() > 2 {
            return Err(GradError::BadOperand {
                op: "leaf",
                shape: value.shape().to_vec(),
            });
        }
        Ok(self.push(value, Op::Leaf))
    }

    /// Input that the caller does not intend to differentiate. The tape
    /// still computes its adjoint (it is simply a leaf); the distinction is
    /// documentation at the call site.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Result<NodeId, GradError> {
        self.leaf(value)
    }

    /// Rank-0 constant.
    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::Leaf)
    }

    /// Rank-1 constant.
    pub fn vector(&mut self, v: &[f64]) -> NodeId {
        self.push(ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap(), Op::Leaf)
    }

    /// Rank-2 constant.
    pub fn matrix(&mut self, m: &Array2<f64>) -> NodeId {
        self.push(m.clone().into_dyn(), Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[self.idx(id).expect("foreign node")].value
    }

    /// Value of a rank-0 node.
    pub fn value_scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.ndim(), 0, "value_scalar on non-scalar node");
        *v.first().unwrap()
    }

    /// Adjoint computed by the most recent [`Tape::backward`]; `None` before
    /// any backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.nodes[self.idx(id).expect("foreign node")].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise arithmetic ------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.elementwise("add", a, b, true, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.elementwise("sub", a, b, false, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.elementwise("mul", a, b, true, |x, y| x * y)
    }

    /// Shared shape logic: identical shapes always work; a rank-0 operand
    /// broadcasts against anything; a rank-1 operand broadcasts across the
    /// rows of a rank-2 operand when lengths match columns. Symmetric
    /// broadcasts are only allowed for commutative ops (`add`, `mul`);
    /// `sub` restricts broadcasting to the right-hand side.
    fn elementwise(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        symmetric: bool,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, GradError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let lhs_broadcasts = va.ndim() == 0 || (va.ndim() == 1 && vb.ndim() == 2);
        let ok = broadcast_compatible(va.shape(), vb.shape())
            && (symmetric || !lhs_broadcasts || va.shape() == vb.shape());
        if !ok {
            return Err(GradError::ShapeMismatch {
                op: opname,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let value = apply_broadcast(va, vb, f);
        let op = match opname {
            "add" => Op::Add(ia as u32, ib as u32),
            "sub" => Op::Sub(ia as u32, ib as u32),
            _ => Op::Mul(ia as u32, ib as u32),
        };
        Ok(self.push(value, op))
    }

    // ---- linear algebra ---------------------------------------------------

    /// Matrix/vector product. Supports (r,c)x(c,d), (r,c)x(c,), (r,)x(r,c),
    /// and the rank-1 dot product (n,)x(n,) -> scalar.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mismatch = || GradError::ShapeMismatch {
            op: "matmul",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        let value: ArrayD<f64> = match (va.ndim(), vb.ndim()) {
            (2, 2) => {
                let (ma, mb) = (va.view().into_dimensionality::<Ix2>().unwrap(),
                                vb.view().into_dimensionality::<Ix2>().unwrap());
                if ma.ncols() != mb.nrows() {
                    return Err(mismatch());
                }
                ma.dot(&mb).into_dyn()
            }
            (2, 1) => {
                let ma = va.view().into_dimensionality::<Ix2>().unwrap();
                let xb = vb.view().into_dimensionality::<Ix1>().unwrap();
                if ma.ncols() != xb.len() {
                    return Err(mismatch());
                }
                ma.dot(&xb).into_dyn()
            }
            (1, 2) => {
                let xa = va.view().into_dimensionality::<Ix1>().unwrap();
                let mb = vb.view().into_dimensionality::<Ix2>().unwrap();
                if xa.len() != mb.nrows() {
                    return Err(mismatch());
                }
                xa.dot(&mb).into_dyn()
            }
            (1, 1) => {
                let xa = va.view().into_dimensionality::<Ix1>().unwrap();
                let xb = vb.view().into_dimensionality::<Ix1>().unwrap();
                if xa.len() != xb.len() {
                    return Err(mismatch());
                }
                ArrayD::from_elem(IxDyn(&[]), xa.dot(&xb))
            }
            _ => return Err(mismatch()),
        };
        Ok(self.push(value, Op::MatMul(ia as u32, ib as u32)))
    }

    /// Row `index` of a matrix (rank 2 -> rank 1) or element `index` of a
    /// vector (rank 1 -> rank 0).
    pub fn gather(&mut self, a: NodeId, index: usize) -> Result<NodeId, GradError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let value = match va.ndim() {
            2 => {
                if index >= va.shape()[0] {
                    return Err(GradError::IndexOutOfBounds {
                        op: "gather",
                        index,
                        shape: va.shape().to_vec(),
                    });
                }
                va.index_axis(Axis(0), index).to_owned()
            }
            1 => {
                if index >= va.shape()[0] {
                    return Err(GradError::IndexOutOfBounds {
                        op: "gather",
                        index,
                        shape: va.shape().to_vec(),
                    });
                }
                ArrayD::from_elem(IxDyn(&[]), va[[index]])
            }
            _ => {
                return Err(GradError::BadOperand {
                    op: "gather",
                    shape: va.shape().to_vec(),
                })
            }
        };
        Ok(self.push(value, Op::Gather(ia as u32, index)))
    }

    /// Concatenation of two vectors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.ndim() != 1 || vb.ndim() != 1 {
            return Err(GradError::ShapeMismatch {
                op: "concat",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(va.len() + vb.len());
        out.extend(va.iter().copied());
        out.extend(vb.iter().copied());
        let value = ArrayD::from_shape_vec(IxDyn(&[out.len()]), out).unwrap();
        Ok(self.push(value, Op::Concat(ia as u32, ib as u32)))
    }

    // ---- nonlinearities ----------------------------------------------------

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.mapv(f64::tanh);
        Ok(self.push(value, Op::Tanh(ia as u32)))
    }

    /// Natural log; rejects non-positive entries because their gradients are
    /// useless (log-space pipelines should subtract `logsumexp_row` instead).
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let ia = self.idx(a)?;
        if let Some(&bad) = self.nodes[ia].value.iter().find(|v| **v <= 0.0) {
            return Err(GradError::NonPositiveLog { value: bad });
        }
        let value = self.nodes[ia].value.mapv(f64::ln);
        Ok(self.push(value, Op::Log(ia as u32)))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.mapv(f64::exp);
        Ok(self.push(value, Op::Exp(ia as u32)))
    }

    /// Tempered softmax `softmax(x / tau)`: rank 1 normalizes the vector,
    /// rank 2 normalizes each row independently.
    pub fn softmax(&mut self, a: NodeId, tau: f64) -> Result<NodeId, GradError> {
        if !(tau > 0.0) {
            return Err(GradError::BadTemperature(tau));
        }
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let value = match va.ndim() {
            1 => {
                let xs: Vec<f64> = va.iter().copied().collect();
                let mut out = vec![0.0; xs.len()];
                logspace::softmax_tempered_into(&xs, tau, &mut out);
                ArrayD::from_shape_vec(IxDyn(&[out.len()]), out).unwrap()
            }
            2 => {
                let m = va.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Array2::zeros(m.dim());
                for (mut orow, irow) in out.rows_mut().into_iter().zip(m.rows()) {
                    let xs: Vec<f64> = irow.iter().copied().collect();
                    let mut buf = vec![0.0; xs.len()];
                    logspace::softmax_tempered_into(&xs, tau, &mut buf);
                    for (o, v) in orow.iter_mut().zip(buf) {
                        *o = v;
                    }
                }
                out.into_dyn()
            }
            _ => {
                return Err(GradError::BadOperand {
                    op: "softmax",
                    shape: va.shape().to_vec(),
                })
            }
        };
        Ok(self.push(value, Op::Softmax(ia as u32, tau)))
    }

    /// `logsumexp` over the last axis: rank 1 -> scalar, rank 2 -> one value
    /// per row.
    pub fn logsumexp_row(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let value = match va.ndim() {
            1 => {
                let xs: Vec<f64> = va.iter().copied().collect();
                ArrayD::from_elem(IxDyn(&[]), logspace::logsumexp(&xs))
            }
            2 => {
                let m = va.view().into_dimensionality::<Ix2>().unwrap();
                let out: Vec<f64> = m
                    .rows()
                    .into_iter()
                    .map(|r| logspace::logsumexp(&r.iter().copied().collect::<Vec<_>>()))
                    .collect();
                ArrayD::from_shape_vec(IxDyn(&[out.len()]), out).unwrap()
            }
            _ => {
                return Err(GradError::BadOperand {
                    op: "logsumexp_row",
                    shape: va.shape().to_vec(),
                })
            }
        };
        Ok(self.push(value, Op::LogSumExpRow(ia as u32)))
    }

    /// Maximum over the last axis (rank 1 -> scalar, rank 2 -> per-row).
    /// Gradient flows to the lowest-index argmax only, matching the
    /// tie-breaking of the value-level Viterbi recursion.
    pub fn max_row(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let value = match va.ndim() {
            1 => {
                let xs: Vec<f64> = va.iter().copied().collect();
                ArrayD::from_elem(IxDyn(&[]), xs[logspace::argmax(&xs)])
            }
            2 => {
                let m = va.view().into_dimensionality::<Ix2>().unwrap();
                let out: Vec<f64> = m
                    .rows()
                    .into_iter()
                    .map(|r| {
                        let xs: Vec<f64> = r.iter().copied().collect();
                        xs[logspace::argmax(&xs)]
                    })
                    .collect();
                ArrayD::from_shape_vec(IxDyn(&[out.len()]), out).unwrap()
            }
            _ => {
                return Err(GradError::BadOperand {
                    op: "max_row",
                    shape: va.shape().to_vec(),
                })
            }
        };
        Ok(self.push(value, Op::MaxRow(ia as u32)))
    }

    // ---- reductions and reshaping ------------------------------------------

    /// Sum of all entries.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let ia = self.idx(a)?;
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[ia].value.sum());
        Ok(self.push(value, Op::Sum(ia as u32)))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if va.is_empty() {
            return Err(GradError::BadOperand {
                op: "mean",
                shape: va.shape().to_vec(),
            });
        }
        let value = ArrayD::from_elem(IxDyn(&[]), va.sum() / va.len() as f64);
        Ok(self.push(value, Op::Mean(ia as u32)))
    }

    /// Multiplication by a compile-time-known constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, GradError> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.mapv(|v| c * v);
        Ok(self.push(value, Op::Scale(ia as u32, c)))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if va.ndim() != 2 {
            return Err(GradError::BadOperand {
                op: "transpose",
                shape: va.shape().to_vec(),
            });
        }
        let value = va.view().into_dimensionality::<Ix2>().unwrap().t().to_owned().into_dyn();
        Ok(self.push(value, Op::Transpose(ia as u32)))
    }

    /// Straight-through node: the forward value is `hard`'s, the full
    /// adjoint is routed to `soft`, and `hard` receives no gradient.
    pub fn straight_through(&mut self, hard: NodeId, soft: NodeId) -> Result<NodeId, GradError> {
        let (ih, is) = (self.idx(hard)?, self.idx(soft)?);
        let (vh, vs) = (&self.nodes[ih].value, &self.nodes[is].value);
        if vh.shape() != vs.shape() {
            return Err(GradError::ShapeMismatch {
                op: "straight_through",
                lhs: vh.shape().to_vec(),
                rhs: vs.shape().to_vec(),
            });
        }
        let value = vh.clone();
        Ok(self.push(value, Op::StraightThrough { soft: is as u32 }))
    }

    // ---- reverse sweep -------------------------------------------------------

    /// Accumulates adjoints of every node with respect to the scalar `loss`.
    /// Nodes that do not feed the loss end with an all-zero gradient.
    /// Each call starts from a clean slate, so per-sample losses on a shared
    /// tape can be differentiated one after another.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GradError> {
        let l = self.idx(loss)?;
        if self.nodes[l].value.ndim() != 0 {
            return Err(GradError::NonScalarLoss {
                shape: self.nodes[l].value.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[l] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        for i in (0..=l).rev() {
            let Some(g) = adj[i].clone() else { continue };
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (a as usize, b as usize);
                    let da = reduce_to_shape(&g, self.nodes[a].value.shape());
                    let db = reduce_to_shape(&g, self.nodes[b].value.shape());
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (a as usize, b as usize);
                    let da = reduce_to_shape(&g, self.nodes[a].value.shape());
                    let db = reduce_to_shape(&g, self.nodes[b].value.shape()).mapv(|v| -v);
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (a as usize, b as usize);
                    let ga = apply_broadcast(&g, &self.nodes[b].value, |x, y| x * y);
                    let gb = apply_broadcast(&g, &self.nodes[a].value, |x, y| x * y);
                    let da = reduce_to_shape(&ga, self.nodes[a].value.shape());
                    let db = reduce_to_shape(&gb, self.nodes[b].value.shape());
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (a as usize, b as usize);
                    let va = self.nodes[a].value.clone();
                    let vb = self.nodes[b].value.clone();
                    let (da, db) = matmul_backward(&va, &vb, &g);
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
                Op::Gather(a, index) => {
                    let a = a as usize;
                    let mut da = ArrayD::zeros(self.nodes[a].value.raw_dim());
                    match da.ndim() {
                        2 => {
                            let mut row = da.index_axis_mut(Axis(0), index);
                            row.assign(&g);
                        }
                        _ => da[[index]] = *g.first().unwrap(),
                    }
                    accumulate(&mut adj, a, da);
                }
                Op::Concat(a, b) => {
                    let (a, b) = (a as usize, b as usize);
                    let la = self.nodes[a].value.len();
                    let lb = self.nodes[b].value.len();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let da = ArrayD::from_shape_vec(IxDyn(&[la]), flat[..la].to_vec()).unwrap();
                    let db = ArrayD::from_shape_vec(IxDyn(&[lb]), flat[la..].to_vec()).unwrap();
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = ndarray::Zip::from(&g).and(y).map_collect(|&gi, &yi| gi * (1.0 - yi * yi));
                    accumulate(&mut adj, a as usize, da);
                }
                Op::Log(a) => {
                    let a = a as usize;
                    let da = ndarray::Zip::from(&g)
                        .and(&self.nodes[a].value)
                        .map_collect(|&gi, &xi| gi / xi);
                    accumulate(&mut adj, a, da);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    let da = ndarray::Zip::from(&g).and(y).map_collect(|&gi, &yi| gi * yi);
                    accumulate(&mut adj, a as usize, da);
                }
                Op::Softmax(a, tau) => {
                    let y = self.nodes[i].value.clone();
                    let da = softmax_backward(&y, &g, tau);
                    accumulate(&mut adj, a as usize, da);
                }
                Op::LogSumExpRow(a) => {
                    let a = a as usize;
                    let x = &self.nodes[a].value;
                    let lse = &self.nodes[i].value;
                    let da = match x.ndim() {
                        1 => {
                            let gs = *g.first().unwrap();
                            let l = *lse.first().unwrap();
                            x.mapv(|xi| gs * (xi - l).exp())
                        }
                        _ => {
                            let xm = x.view().into_dimensionality::<Ix2>().unwrap();
                            let mut out = Array2::zeros(xm.dim());
                            for (r, mut orow) in out.rows_mut().into_iter().enumerate() {
                                let gi = g[[r]];
                                let li = lse[[r]];
                                for (o, &xi) in orow.iter_mut().zip(xm.row(r)) {
                                    *o = gi * (xi - li).exp();
                                }
                            }
                            out.into_dyn()
                        }
                    };
                    accumulate(&mut adj, a, da);
                }
                Op::MaxRow(a) => {
                    let a = a as usize;
                    let x = &self.nodes[a].value;
                    let mut da = ArrayD::zeros(x.raw_dim());
                    match x.ndim() {
                        1 => {
                            let xs: Vec<f64> = x.iter().copied().collect();
                            da[[logspace::argmax(&xs)]] = *g.first().unwrap();
                        }
                        _ => {
                            let xm = x.view().into_dimensionality::<Ix2>().unwrap();
                            for (r, row) in xm.rows().into_iter().enumerate() {
                                let xs: Vec<f64> = row.iter().copied().collect();
                                da[[r, logspace::argmax(&xs)]] = g[[r]];
                            }
                        }
                    }
                    accumulate(&mut adj, a, da);
                }
                Op::Sum(a) => {
                    let a = a as usize;
                    let gs = *g.first().unwrap();
                    let da = ArrayD::from_elem(self.nodes[a].value.raw_dim(), gs);
                    accumulate(&mut adj, a, da);
                }
                Op::Mean(a) => {
                    let a = a as usize;
                    let n = self.nodes[a].value.len() as f64;
                    let gs = *g.first().unwrap() / n;
                    let da = ArrayD::from_elem(self.nodes[a].value.raw_dim(), gs);
                    accumulate(&mut adj, a, da);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, a as usize, g.mapv(|v| c * v));
                }
                Op::Transpose(a) => {
                    let gt = g
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .t()
                        .to_owned()
                        .into_dyn();
                    accumulate(&mut adj, a as usize, gt);
                }
                Op::StraightThrough { soft } => {
                    accumulate(&mut adj, soft as usize, g.clone());
                }
            }
        }
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            node.grad = Some(a.unwrap_or_else(|| ArrayD::zeros(node.value.raw_dim())));
        }
        Ok(())
    }
}

/// True when the two shapes are usable by an elementwise op in either
/// orientation.
fn broadcast_compatible(a: &[usize], b: &[usize]) -> bool {
    if a == b {
        return true;
    }
    match (a.len(), b.len()) {
        (_, 0) | (0, _) => true,
        (2, 1) => a[1] == b[0],
        (1, 2) => b[1] == a[0],
        _ => false,
    }
}

/// Applies `f` elementwise with the broadcast rules of
/// [`broadcast_compatible`]. The output takes the higher-rank shape.
fn apply_broadcast(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    if a.shape() == b.shape() {
        return ndarray::Zip::from(a).and(b).map_collect(|&x, &y| f(x, y));
    }
    match (a.ndim(), b.ndim()) {
        (_, 0) => {
            let y = *b.first().unwrap();
            a.mapv(|x| f(x, y))
        }
        (0, _) => {
            let x = *a.first().unwrap();
            b.mapv(|y| f(x, y))
        }
        (2, 1) => {
            let am = a.view().into_dimensionality::<Ix2>().unwrap();
            let bv = b.view().into_dimensionality::<Ix1>().unwrap();
            let mut out = Array2::zeros(am.dim());
            for (mut orow, arow) in out.rows_mut().into_iter().zip(am.rows()) {
                for ((o, &x), &y) in orow.iter_mut().zip(arow).zip(bv) {
                    *o = f(x, y);
                }
            }
            out.into_dyn()
        }
        (1, 2) => {
            let av = a.view().into_dimensionality::<Ix1>().unwrap();
            let bm = b.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = Array2::zeros(bm.dim());
            for (mut orow, brow) in out.rows_mut().into_iter().zip(bm.rows()) {
                for ((o, &y), &x) in orow.iter_mut().zip(brow).zip(av) {
                    *o = f(x, y);
                }
            }
            out.into_dyn()
        }
        _ => unreachable!("shapes were validated before"),
    }
}

/// Sums `g` down to `shape` (inverse of broadcasting in the forward pass).
fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if g.shape() == shape {
        return g.clone();
    }
    if shape.is_empty() {
        return ArrayD::from_elem(IxDyn(&[]), g.sum());
    }
    // Remaining case: g is (r, c), target is (c,): sum over rows.
    debug_assert_eq!(g.ndim(), 2);
    debug_assert_eq!(shape.len(), 1);
    let gm = g.view().into_dimensionality::<Ix2>().unwrap();
    gm.sum_axis(Axis(0)).into_dyn()
}

fn accumulate(adj: &mut [Option<ArrayD<f64>>], idx: usize, delta: ArrayD<f64>) {
    match &mut adj[idx] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn matmul_backward(
    va: &ArrayD<f64>,
    vb: &ArrayD<f64>,
    g: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    match (va.ndim(), vb.ndim()) {
        (2, 2) => {
            let a = va.view().into_dimensionality::<Ix2>().unwrap();
            let b = vb.view().into_dimensionality::<Ix2>().unwrap();
            let gm = g.view().into_dimensionality::<Ix2>().unwrap();
            (gm.dot(&b.t()).into_dyn(), a.t().dot(&gm).into_dyn())
        }
        (2, 1) => {
            let a = va.view().into_dimensionality::<Ix2>().unwrap();
            let b = vb.view().into_dimensionality::<Ix1>().unwrap();
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut da = Array2::zeros(a.dim());
            for (mut row, &gi) in da.rows_mut().into_iter().zip(gv) {
                for (cell, &bj) in row.iter_mut().zip(b) {
                    *cell = gi * bj;
                }
            }
            (da.into_dyn(), a.t().dot(&gv).into_dyn())
        }
        (1, 2) => {
            let a = va.view().into_dimensionality::<Ix1>().unwrap();
            let b = vb.view().into_dimensionality::<Ix2>().unwrap();
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut db = Array2::zeros(b.dim());
            for (mut row, &ai) in db.rows_mut().into_iter().zip(a) {
                for (cell, &gj) in row.iter_mut().zip(gv) {
                    *cell = ai * gj;
                }
            }
            (b.dot(&gv).into_dyn(), db.into_dyn())
        }
        (1, 1) => {
            let gs = *g.first().unwrap();
            (vb.mapv(|v| gs * v), va.mapv(|v| gs * v))
        }
        _ => unreachable!("matmul shapes validated at forward time"),
    }
}

fn softmax_backward(y: &ArrayD<f64>, g: &ArrayD<f64>, tau: f64) -> ArrayD<f64> {
    match y.ndim() {
        1 => {
            let dot: f64 = y.iter().zip(g.iter()).map(|(yi, gi)| yi * gi).sum();
            ndarray::Zip::from(y)
                .and(g)
                .map_collect(|&yi, &gi| yi * (gi - dot) / tau)
        }
        _ => {
            let ym = y.view().into_dimensionality::<Ix2>().unwrap();
            let gm = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = Array2::zeros(ym.dim());
            for ((mut orow, yrow), grow) in out
                .rows_mut()
                .into_iter()
                .zip(ym.rows())
                .zip(gm.rows())
            {
                let dot: f64 = yrow.iter().zip(grow.iter()).map(|(yi, gi)| yi * gi).sum();
                for ((o, &yi), &gi) in orow.iter_mut().zip(yrow).zip(grow) {
                    *o = yi * (gi - dot) / tau;
                }
            }
            out.into_dyn()
        }
    }
}
