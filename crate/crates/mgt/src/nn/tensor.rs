//! Reverse-mode automatic differentiation over dense 64-bit tensors.
//!
//! Every operation computes its value eagerly and records the expression
//! graph through shared node handles. `backward` walks the graph from a
//! scalar loss in reverse topological order and accumulates gradients into
//! every recorded leaf (parameter). Constants are leaves that never receive
//! gradients. The graph is confined to one thread.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use thiserror::Error;

use crate::mat::Mat;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward through an unrecorded value (no parameter feeds it)")]
    UnrecordedBackward,
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidDropoutRate(f64),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid contraction dims {dims:?} for shape {shape:?}: {reason}")]
    InvalidContraction {
        dims: Vec<usize>,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
}

enum Op {
    Leaf,
    Add(DTensor, DTensor),
    Sub(DTensor, DTensor),
    Mul(DTensor, DTensor),
    Neg(DTensor),
    Scale(DTensor, f64),
    AddScalar(DTensor),
    MatMul(DTensor, DTensor),
    Transpose(DTensor),
    Reshape(DTensor),
    ConcatLast(Vec<DTensor>),
    GatherRows(DTensor, Rc<Vec<usize>>),
    ScatterAddRows(DTensor, Rc<Vec<usize>>),
    Relu(DTensor),
    Sigmoid(DTensor),
    Abs(DTensor),
    Exp(DTensor),
    Ln(DTensor),
    Sqrt(DTensor),
    Recip(DTensor),
    XLogX(DTensor),
    SoftmaxRows(DTensor),
    SumAll(DTensor),
    Contract(DTensor, Vec<usize>),
    Diag3(DTensor),
    Outer(DTensor, DTensor),
    MaxAxis0(DTensor),
    AddRow(DTensor, DTensor),
    MulRow(DTensor, DTensor),
}

struct Node {
    shape: Vec<usize>,
    value: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
    recorded: bool,
}

/// Cheap clonable handle to a tensor node.
#[derive(Clone)]
pub struct DTensor {
    node: Rc<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl DTensor {
    fn new(shape: Vec<usize>, value: Vec<f64>, op: Op, recorded: bool) -> DTensor {
        debug_assert_eq!(numel(&shape), value.len());
        DTensor {
            node: Rc::new(Node {
                shape,
                value: RefCell::new(value),
                grad: RefCell::new(None),
                op,
                recorded,
            }),
        }
    }

    /// Leaf that never receives gradients.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> DTensor {
        assert_eq!(numel(shape), data.len(), "constant data length mismatch");
        DTensor::new(shape.to_vec(), data, Op::Leaf, false)
    }

    /// Recorded leaf: gradients accumulate here.
    pub fn param(shape: &[usize], data: Vec<f64>) -> DTensor {
        assert_eq!(numel(shape), data.len(), "param data length mismatch");
        DTensor::new(shape.to_vec(), data, Op::Leaf, true)
    }

    pub fn scalar(v: f64) -> DTensor {
        DTensor::constant(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> DTensor {
        DTensor::constant(shape, vec![0.0; numel(shape)])
    }

    pub fn from_mat(m: &Mat) -> DTensor {
        DTensor::constant(&[m.rows(), m.cols()], m.data().to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_recorded(&self) -> bool {
        self.node.recorded
    }

    pub fn value(&self) -> Ref<'_, Vec<f64>> {
        self.node.value.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.value.borrow().clone()
    }

    /// Scalar extraction; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() requires a single-element tensor");
        self.node.value.borrow()[0]
    }

    pub fn to_mat(&self) -> Mat {
        assert_eq!(self.shape().len(), 2, "to_mat requires rank 2");
        Mat::from_vec(self.shape()[0], self.shape()[1], self.to_vec())
    }

    /// Overwrite a leaf's value in place (optimizer updates, test fixtures).
    pub fn set_data(&self, data: &[f64]) {
        assert_eq!(data.len(), self.len(), "set_data length mismatch");
        self.node.value.borrow_mut().copy_from_slice(data);
    }

    /// Add `delta` to one entry; used by finite-difference probes.
    pub fn nudge(&self, index: usize, delta: f64) {
        self.node.value.borrow_mut()[index] += delta;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Add `g` into this tensor's gradient accumulator (gradient merging,
    /// minibatch averaging).
    pub fn accumulate_grad(&self, g: &[f64]) {
        assert_eq!(g.len(), self.len(), "gradient length mismatch");
        accumulate(&self.node, 0, g);
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.node)
    }

    fn recorded_any(inputs: &[&DTensor]) -> bool {
        inputs.iter().any(|t| t.node.recorded)
    }

    // ---- elementwise and arithmetic ----

    pub fn add(&self, other: &DTensor) -> DTensor {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let v = {
            let a = self.value();
            let b = other.value();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        DTensor::new(
            self.shape().to_vec(),
            v,
            Op::Add(self.clone(), other.clone()),
            Self::recorded_any(&[self, other]),
        )
    }

    pub fn sub(&self, other: &DTensor) -> DTensor {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let v = {
            let a = self.value();
            let b = other.value();
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        DTensor::new(
            self.shape().to_vec(),
            v,
            Op::Sub(self.clone(), other.clone()),
            Self::recorded_any(&[self, other]),
        )
    }

    pub fn mul(&self, other: &DTensor) -> DTensor {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let v = {
            let a = self.value();
            let b = other.value();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        DTensor::new(
            self.shape().to_vec(),
            v,
            Op::Mul(self.clone(), other.clone()),
            Self::recorded_any(&[self, other]),
        )
    }

    pub fn neg(&self) -> DTensor {
        let v = self.value().iter().map(|x| -x).collect();
        DTensor::new(
            self.shape().to_vec(),
            v,
            Op::Neg(self.clone()),
            self.node.recorded,
        )
    }

    pub fn scale(&self, k: f64) -> DTensor {
        let v = self.value().iter().map(|x| k * x).collect();
        DTensor::new(
            self.shape().to_vec(),
            v,
            Op::Scale(self.clone(), k),
            self.node.recorded,
        )
    }

    pub fn add_scalar(&self, k: f64) -> DTensor {
        let v = self.value().iter().map(|x| x + k).collect();
        DTensor::new(
            self.shape().to_vec(),
            v,
            Op::AddScalar(self.clone()),
            self.node.recorded,
        )
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> DTensor {
        let v = self.value().iter().map(|&x| f(x)).collect();
        DTensor::new(self.shape().to_vec(), v, op, self.node.recorded)
    }

    pub fn relu(&self) -> DTensor {
        self.unary(|x| x.max(0.0), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> DTensor {
        self.unary(stable_sigmoid, Op::Sigmoid(self.clone()))
    }

    pub fn abs(&self) -> DTensor {
        self.unary(f64::abs, Op::Abs(self.clone()))
    }

    pub fn exp(&self) -> DTensor {
        self.unary(f64::exp, Op::Exp(self.clone()))
    }

    /// Natural log; callers must keep inputs strictly positive.
    pub fn ln(&self) -> DTensor {
        self.unary(f64::ln, Op::Ln(self.clone()))
    }

    pub fn sqrt(&self) -> DTensor {
        self.unary(f64::sqrt, Op::Sqrt(self.clone()))
    }

    pub fn recip(&self) -> DTensor {
        self.unary(|x| 1.0 / x, Op::Recip(self.clone()))
    }

    /// `x ln x` with the convention `0 ln 0 = 0`; the entropy building block.
    pub fn xlogx(&self) -> DTensor {
        self.unary(
            |x| if x > 0.0 { x * x.ln() } else { 0.0 },
            Op::XLogX(self.clone()),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &DTensor) -> DTensor {
        assert_eq!(self.shape().len(), 2, "matmul lhs must be rank 2");
        assert_eq!(other.shape().len(), 2, "matmul rhs must be rank 2");
        let (m, p) = (self.shape()[0], self.shape()[1]);
        let (p2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(p, p2, "matmul inner dimension mismatch");
        let mut v = vec![0.0; m * n];
        {
            let a = self.value();
            let b = other.value();
            for i in 0..m {
                for k in 0..p {
                    let aik = a[i * p + k];
                    if aik == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        v[i * n + j] += aik * b[k * n + j];
                    }
                }
            }
        }
        DTensor::new(
            vec![m, n],
            v,
            Op::MatMul(self.clone(), other.clone()),
            Self::recorded_any(&[self, other]),
        )
    }

    pub fn t(&self) -> DTensor {
        assert_eq!(self.shape().len(), 2, "transpose requires rank 2");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let a = self.value();
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = a[i * c + j];
            }
        }
        drop(a);
        DTensor::new(
            vec![c, r],
            v,
            Op::Transpose(self.clone()),
            self.node.recorded,
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> DTensor {
        assert_eq!(numel(shape), self.len(), "reshape element count mismatch");
        DTensor::new(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.clone()),
            self.node.recorded,
        )
    }

    /// Concatenate along the last axis. All inputs must share rank and
    /// leading dimensions.
    pub fn concat_last(inputs: &[DTensor]) -> DTensor {
        assert!(!inputs.is_empty(), "concat_last needs at least one input");
        let rank = inputs[0].shape().len();
        assert!(rank >= 1, "concat_last requires rank >= 1");
        let lead = &inputs[0].shape()[..rank - 1];
        for t in inputs {
            assert_eq!(t.shape().len(), rank, "concat_last rank mismatch");
            assert_eq!(&t.shape()[..rank - 1], lead, "concat_last leading dims differ");
        }
        let outer: usize = lead.iter().product();
        let widths: Vec<usize> = inputs.iter().map(|t| t.shape()[rank - 1]).collect();
        let total: usize = widths.iter().sum();
        let mut v = vec![0.0; outer * total];
        let mut offset = 0;
        for (t, &w) in inputs.iter().zip(&widths) {
            let data = t.value();
            for o in 0..outer {
                v[o * total + offset..o * total + offset + w]
                    .copy_from_slice(&data[o * w..(o + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let recorded = inputs.iter().any(|t| t.node.recorded);
        DTensor::new(shape, v, Op::ConcatLast(inputs.to_vec()), recorded)
    }

    /// Rows of a rank-2 tensor selected by index (duplicates allowed).
    pub fn gather_rows(&self, idx: &Rc<Vec<usize>>) -> DTensor {
        assert_eq!(self.shape().len(), 2, "gather_rows requires rank 2");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let a = self.value();
        let mut v = vec![0.0; idx.len() * c];
        for (i, &src) in idx.iter().enumerate() {
            assert!(src < r, "gather_rows index out of range");
            v[i * c..(i + 1) * c].copy_from_slice(&a[src * c..(src + 1) * c]);
        }
        drop(a);
        DTensor::new(
            vec![idx.len(), c],
            v,
            Op::GatherRows(self.clone(), idx.clone()),
            self.node.recorded,
        )
    }

    /// Accumulate rows into `n_rows` buckets: `out[idx[i]] += self[i]`.
    pub fn scatter_add_rows(&self, idx: &Rc<Vec<usize>>, n_rows: usize) -> DTensor {
        assert_eq!(self.shape().len(), 2, "scatter_add_rows requires rank 2");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert_eq!(r, idx.len(), "scatter_add_rows index length mismatch");
        let a = self.value();
        let mut v = vec![0.0; n_rows * c];
        for (i, &dst) in idx.iter().enumerate() {
            assert!(dst < n_rows, "scatter_add_rows index out of range");
            for j in 0..c {
                v[dst * c + j] += a[i * c + j];
            }
        }
        drop(a);
        DTensor::new(
            vec![n_rows, c],
            v,
            Op::ScatterAddRows(self.clone(), idx.clone()),
            self.node.recorded,
        )
    }

    /// Row-wise softmax of a rank-2 tensor, max-subtracted for stability.
    pub fn softmax_rows(&self) -> DTensor {
        assert_eq!(self.shape().len(), 2, "softmax_rows requires rank 2");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let a = self.value();
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                v[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                v[i * c + j] /= sum;
            }
        }
        drop(a);
        DTensor::new(
            vec![r, c],
            v,
            Op::SoftmaxRows(self.clone()),
            self.node.recorded,
        )
    }

    pub fn sum_all(&self) -> DTensor {
        let v = self.value().iter().sum();
        DTensor::new(vec![1], vec![v], Op::SumAll(self.clone()), self.node.recorded)
    }

    pub fn mean_all(&self) -> DTensor {
        self.sum_all().scale(1.0 / self.len() as f64)
    }

    /// Contraction per the Kronecker-delta rule: all listed axes share one
    /// summation index; positions whose listed indices disagree contribute
    /// nothing. Listed axes must be distinct, in range, and of equal extent.
    pub fn contract(&self, dims: &[usize]) -> Result<DTensor, NnError> {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let mut sorted = dims.to_vec();
        sorted.sort_unstable();
        let invalid = |reason: &str| NnError::InvalidContraction {
            dims: dims.to_vec(),
            shape: shape.clone(),
            reason: reason.to_string(),
        };
        if sorted.is_empty() {
            return Err(invalid("no dims given"));
        }
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate dims"));
        }
        if *sorted.last().unwrap() >= rank {
            return Err(invalid("dim index out of range"));
        }
        let extent = shape[sorted[0]];
        if sorted.iter().any(|&d| shape[d] != extent) {
            return Err(invalid("contracted extents differ"));
        }

        let kept: Vec<usize> = (0..rank).filter(|d| !sorted.contains(d)).collect();
        let out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
        let in_strides = strides(&shape);
        let out_len = numel(&out_shape).max(1);
        let mut v = vec![0.0; out_len];
        let a = self.value();
        let mut out_idx = vec![0usize; kept.len()];
        for out_pos in 0..out_len {
            let mut base = 0usize;
            for (axis_pos, &axis) in kept.iter().enumerate() {
                base += out_idx[axis_pos] * in_strides[axis];
            }
            let mut acc = 0.0;
            for j in 0..extent {
                let mut pos = base;
                for &axis in &sorted {
                    pos += j * in_strides[axis];
                }
                acc += a[pos];
            }
            v[out_pos] = acc;
            increment_index(&mut out_idx, &out_shape);
        }
        drop(a);
        let final_shape = if out_shape.is_empty() {
            vec![1]
        } else {
            out_shape
        };
        Ok(DTensor::new(
            final_shape,
            v,
            Op::Contract(self.clone(), sorted),
            self.node.recorded,
        ))
    }

    /// Sum over axis 0 of a rank-2 tensor.
    pub fn sum_axis0(&self) -> DTensor {
        assert_eq!(self.shape().len(), 2, "sum_axis0 requires rank 2");
        self.contract(&[0]).expect("axis 0 always contractable")
    }

    pub fn mean_axis0(&self) -> DTensor {
        let r = self.shape()[0];
        self.sum_axis0().scale(1.0 / r as f64)
    }

    /// Diagonal slice of an `(n, n, c)` tensor, producing `(n, c)`.
    pub fn diag3(&self) -> DTensor {
        assert_eq!(self.shape().len(), 3, "diag3 requires rank 3");
        let (n, n2, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        assert_eq!(n, n2, "diag3 requires square node dims");
        let a = self.value();
        let mut v = vec![0.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                v[i * c + ch] = a[(i * n + i) * c + ch];
            }
        }
        drop(a);
        DTensor::new(vec![n, c], v, Op::Diag3(self.clone()), self.node.recorded)
    }

    /// Outer (tensor) product: output shape is the concatenation of both
    /// input shapes and `out[i..., j...] = a[i...] * b[j...]`.
    pub fn outer(&self, other: &DTensor) -> DTensor {
        let a = self.value();
        let b = other.value();
        let mut v = vec![0.0; a.len() * b.len()];
        for (ia, &x) in a.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (ib, &y) in b.iter().enumerate() {
                v[ia * b.len() + ib] = x * y;
            }
        }
        drop(a);
        drop(b);
        let mut shape = self.shape().to_vec();
        shape.extend_from_slice(other.shape());
        DTensor::new(
            shape,
            v,
            Op::Outer(self.clone(), other.clone()),
            Self::recorded_any(&[self, other]),
        )
    }

    /// Column-wise maximum of a rank-2 tensor; gradients route to the first
    /// row attaining each maximum.
    pub fn max_axis0(&self) -> DTensor {
        assert_eq!(self.shape().len(), 2, "max_axis0 requires rank 2");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert!(r >= 1, "max_axis0 requires at least one row");
        let a = self.value();
        let mut v = vec![f64::NEG_INFINITY; c];
        for i in 0..r {
            for j in 0..c {
                if a[i * c + j] > v[j] {
                    v[j] = a[i * c + j];
                }
            }
        }
        drop(a);
        DTensor::new(vec![c], v, Op::MaxAxis0(self.clone()), self.node.recorded)
    }

    /// Broadcast-add a length-`c` vector to every row of an `(r, c)` tensor.
    pub fn add_row(&self, row: &DTensor) -> DTensor {
        assert_eq!(self.shape().len(), 2, "add_row lhs must be rank 2");
        assert_eq!(row.shape().len(), 1, "add_row rhs must be rank 1");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert_eq!(row.shape()[0], c, "add_row width mismatch");
        let a = self.value();
        let b = row.value();
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] = a[i * c + j] + b[j];
            }
        }
        drop(a);
        drop(b);
        DTensor::new(
            vec![r, c],
            v,
            Op::AddRow(self.clone(), row.clone()),
            Self::recorded_any(&[self, row]),
        )
    }

    /// Broadcast-multiply every row of an `(r, c)` tensor by a length-`c`
    /// vector.
    pub fn mul_row(&self, row: &DTensor) -> DTensor {
        assert_eq!(self.shape().len(), 2, "mul_row lhs must be rank 2");
        assert_eq!(row.shape().len(), 1, "mul_row rhs must be rank 1");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert_eq!(row.shape()[0], c, "mul_row width mismatch");
        let a = self.value();
        let b = row.value();
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] = a[i * c + j] * b[j];
            }
        }
        drop(a);
        drop(b);
        DTensor::new(
            vec![r, c],
            v,
            Op::MulRow(self.clone(), row.clone()),
            Self::recorded_any(&[self, row]),
        )
    }

    // ---- backward ----

    /// Reverse-mode gradient pass from a scalar loss. Gradients of recorded
    /// leaves accumulate across calls; intermediate gradients are reset per
    /// call.
    pub fn backward(&self) -> Result<(), NnError> {
        if self.len() != 1 {
            return Err(NnError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.node.recorded {
            return Err(NnError::UnrecordedBackward);
        }
        let order = self.topo_order();
        // Reset intermediates so repeated backward calls accumulate only
        // into leaves.
        for t in &order {
            if !matches!(t.node.op, Op::Leaf) {
                *t.node.grad.borrow_mut() = None;
            }
        }
        accumulate(&self.node, 0, &[1.0]);
        for t in order.iter().rev() {
            t.push_to_inputs();
        }
        Ok(())
    }

    /// Post-order over recorded nodes: inputs appear before consumers.
    fn topo_order(&self) -> Vec<DTensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        // Stack of (tensor, expanded?) for iterative post-order.
        let mut stack: Vec<(DTensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.contains(&t.ptr()) {
                continue;
            }
            visited.insert(t.ptr());
            stack.push((t.clone(), true));
            t.for_each_input(|input| {
                if input.node.recorded && !visited.contains(&input.ptr()) {
                    stack.push((input.clone(), false));
                }
            });
        }
        order
    }

    fn for_each_input(&self, mut f: impl FnMut(&DTensor)) {
        match &self.node.op {
            Op::Leaf => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::Outer(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => {
                f(a);
                f(b);
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::XLogX(a)
            | Op::SoftmaxRows(a)
            | Op::SumAll(a)
            | Op::Contract(a, _)
            | Op::Diag3(a)
            | Op::MaxAxis0(a) => f(a),
            Op::ConcatLast(inputs) => {
                for t in inputs {
                    f(t);
                }
            }
        }
    }

    /// Propagate this node's gradient into its inputs.
    fn push_to_inputs(&self) {
        let grad_ref = self.node.grad.borrow();
        let Some(g) = grad_ref.as_ref() else {
            return;
        };
        let g = g.clone();
        drop(grad_ref);
        match &self.node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_grad(a, &g);
                add_grad(b, &g);
            }
            Op::Sub(a, b) => {
                add_grad(a, &g);
                scaled_grad(b, &g, -1.0);
            }
            Op::Mul(a, b) => {
                if a.node.recorded {
                    let bv = b.value();
                    let contrib: Vec<f64> = g.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
                    drop(bv);
                    add_grad(a, &contrib);
                }
                if b.node.recorded {
                    let av = a.value();
                    let contrib: Vec<f64> = g.iter().zip(av.iter()).map(|(x, y)| x * y).collect();
                    drop(av);
                    add_grad(b, &contrib);
                }
            }
            Op::Neg(a) => scaled_grad(a, &g, -1.0),
            Op::Scale(a, k) => scaled_grad(a, &g, *k),
            Op::AddScalar(a) => add_grad(a, &g),
            Op::MatMul(a, b) => {
                let (m, p) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.node.recorded {
                    let bv = b.value();
                    let mut da = vec![0.0; m * p];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for k in 0..p {
                                da[i * p + k] += gij * bv[k * n + j];
                            }
                        }
                    }
                    drop(bv);
                    add_grad(a, &da);
                }
                if b.node.recorded {
                    let av = a.value();
                    let mut db = vec![0.0; p * n];
                    for i in 0..m {
                        for k in 0..p {
                            let aik = av[i * p + k];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[k * n + j] += aik * g[i * n + j];
                            }
                        }
                    }
                    drop(av);
                    add_grad(b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                add_grad(a, &da);
            }
            Op::Reshape(a) => add_grad(a, &g),
            Op::ConcatLast(inputs) => {
                let rank = self.shape().len();
                let outer: usize = self.shape()[..rank - 1].iter().product();
                let total = self.shape()[rank - 1];
                let mut offset = 0;
                for t in inputs {
                    let w = t.shape()[rank - 1];
                    if t.node.recorded {
                        let mut dt = vec![0.0; outer * w];
                        for o in 0..outer {
                            dt[o * w..(o + 1) * w]
                                .copy_from_slice(&g[o * total + offset..o * total + offset + w]);
                        }
                        add_grad(t, &dt);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = a.shape()[1];
                let mut da = vec![0.0; a.len()];
                for (i, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[src * c + j] += g[i * c + j];
                    }
                }
                add_grad(a, &da);
            }
            Op::ScatterAddRows(a, idx) => {
                let c = a.shape()[1];
                let mut da = vec![0.0; a.len()];
                for (i, &dst) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] = g[dst * c + j];
                    }
                }
                add_grad(a, &da);
            }
            Op::Relu(a) => {
                let av = a.value();
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(av.iter())
                    .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                    .collect();
                drop(av);
                add_grad(a, &contrib);
            }
            Op::Sigmoid(a) => {
                let y = self.value();
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                    .collect();
                drop(y);
                add_grad(a, &contrib);
            }
            Op::Abs(a) => {
                let av = a.value();
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(av.iter())
                    .map(|(&gi, &x)| gi * sign(x))
                    .collect();
                drop(av);
                add_grad(a, &contrib);
            }
            Op::Exp(a) => {
                let y = self.value();
                let contrib: Vec<f64> =
                    g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi).collect();
                drop(y);
                add_grad(a, &contrib);
            }
            Op::Ln(a) => {
                let av = a.value();
                let contrib: Vec<f64> =
                    g.iter().zip(av.iter()).map(|(&gi, &x)| gi / x).collect();
                drop(av);
                add_grad(a, &contrib);
            }
            Op::Sqrt(a) => {
                let y = self.value();
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gi, &yi)| if yi > 0.0 { gi * 0.5 / yi } else { 0.0 })
                    .collect();
                drop(y);
                add_grad(a, &contrib);
            }
            Op::Recip(a) => {
                let y = self.value();
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gi, &yi)| -gi * yi * yi)
                    .collect();
                drop(y);
                add_grad(a, &contrib);
            }
            Op::XLogX(a) => {
                let av = a.value();
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(av.iter())
                    .map(|(&gi, &x)| if x > 0.0 { gi * (x.ln() + 1.0) } else { 0.0 })
                    .collect();
                drop(av);
                add_grad(a, &contrib);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                let y = self.value();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        da[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
                drop(y);
                add_grad(a, &da);
            }
            Op::SumAll(a) => {
                let contrib = vec![g[0]; a.len()];
                add_grad(a, &contrib);
            }
            Op::Contract(a, dims) => {
                let shape = a.shape().to_vec();
                let in_strides = strides(&shape);
                let kept: Vec<usize> =
                    (0..shape.len()).filter(|d| !dims.contains(d)).collect();
                let out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
                let out_len = numel(&out_shape).max(1);
                let extent = shape[dims[0]];
                let mut da = vec![0.0; a.len()];
                let mut out_idx = vec![0usize; kept.len()];
                for out_pos in 0..out_len {
                    let mut base = 0usize;
                    for (axis_pos, &axis) in kept.iter().enumerate() {
                        base += out_idx[axis_pos] * in_strides[axis];
                    }
                    let gi = g[out_pos];
                    for j in 0..extent {
                        let mut pos = base;
                        for &axis in dims {
                            pos += j * in_strides[axis];
                        }
                        da[pos] += gi;
                    }
                    increment_index(&mut out_idx, &out_shape);
                }
                add_grad(a, &da);
            }
            Op::Diag3(a) => {
                let (n, c) = (a.shape()[0], a.shape()[2]);
                let mut da = vec![0.0; a.len()];
                for i in 0..n {
                    for ch in 0..c {
                        da[(i * n + i) * c + ch] = g[i * c + ch];
                    }
                }
                add_grad(a, &da);
            }
            Op::Outer(a, b) => {
                let bl = b.len();
                if a.node.recorded {
                    let bv = b.value();
                    let mut da = vec![0.0; a.len()];
                    for (ia, slot) in da.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for ib in 0..bl {
                            acc += g[ia * bl + ib] * bv[ib];
                        }
                        *slot = acc;
                    }
                    drop(bv);
                    add_grad(a, &da);
                }
                if b.node.recorded {
                    let av = a.value();
                    let mut db = vec![0.0; bl];
                    for (ia, &x) in av.iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for (ib, slot) in db.iter_mut().enumerate() {
                            *slot += g[ia * bl + ib] * x;
                        }
                    }
                    drop(av);
                    add_grad(b, &db);
                }
            }
            Op::MaxAxis0(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                let av = a.value();
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    let mut arg = 0;
                    let mut best = av[j];
                    for i in 1..r {
                        if av[i * c + j] > best {
                            best = av[i * c + j];
                            arg = i;
                        }
                    }
                    da[arg * c + j] = g[j];
                }
                drop(av);
                add_grad(a, &da);
            }
            Op::AddRow(a, b) => {
                if a.node.recorded {
                    add_grad(a, &g);
                }
                if b.node.recorded {
                    let (r, c) = (a.shape()[0], a.shape()[1]);
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    add_grad(b, &db);
                }
            }
            Op::MulRow(a, b) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                if a.node.recorded {
                    let bv = b.value();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[i * c + j] * bv[j];
                        }
                    }
                    drop(bv);
                    add_grad(a, &da);
                }
                if b.node.recorded {
                    let av = a.value();
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j] * av[i * c + j];
                        }
                    }
                    drop(av);
                    add_grad(b, &db);
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn increment_index(idx: &mut [usize], shape: &[usize]) {
    for axis in (0..idx.len()).rev() {
        idx[axis] += 1;
        if idx[axis] < shape[axis] {
            return;
        }
        idx[axis] = 0;
    }
}

fn accumulate(node: &Node, offset: usize, contrib: &[f64]) {
    let mut grad = node.grad.borrow_mut();
    let slot = grad.get_or_insert_with(|| vec![0.0; node.value.borrow().len()]);
    for (i, &c) in contrib.iter().enumerate() {
        slot[offset + i] += c;
    }
}

fn add_grad(t: &DTensor, contrib: &[f64]) {
    if t.node.recorded {
        accumulate(&t.node, 0, contrib);
    }
}

fn scaled_grad(t: &DTensor, g: &[f64], k: f64) {
    if t.node.recorded {
        let contrib: Vec<f64> = g.iter().map(|&x| k * x).collect();
        accumulate(&t.node, 0, &contrib);
    }
}
