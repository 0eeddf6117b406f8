//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its tensors in execution
//! order. Because nodes can only reference earlier nodes, the recording order
//! is already a topological order and [`Tape::backward`] replays it in reverse,
//! visiting each recorded operation at most once.
//!
//! Tensors are row-major. Operations that act "per row" (softmax, layer norm,
//! log-softmax) treat the last axis as the row and everything before it as
//! the batch.

mod gradcheck;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{finite_diff_check, finite_diff_check_many};

/// Floating point width used for tensor storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar type a tape can differentiate through.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    /// `c = op(a) * op(b) (+ c)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
    ///
    /// A `*_t` flag means the operand is stored transposed (e.g. `a_t` means `a`
    /// is stored as `k x m`).
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn c(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> [isize; 4] {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    [rsa, csa, rsb, csb]
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTES: usize = 4;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_t: bool,
        b: &[f32],
        b_t: bool,
        c: &mut [f32],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        let [rsa, csa, rsb, csb] = gemm_strides(m, k, n, a_t, b_t);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: the asserts above bound every access made with these strides.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTES: usize = 8;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_t: bool,
        b: &[f64],
        b_t: bool,
        c: &mut [f64],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        let [rsa, csa, rsb, csb] = gemm_strides(m, k, n, a_t, b_t);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: the asserts above bound every access made with these strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root has no lineage")]
    NoLineage,
    #[error("backward already ran on this tape; reset gradients before running it again")]
    AlreadyBackpropagated,
    #[error("finite difference epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("objective value is not finite")]
    NonFiniteObjective,
}

pub type Result<T, E = AutogradError> = std::result::Result<T, E>;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(AutogradError::InvalidArgument {
                op: "tensor",
                detail: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::c(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of every axis but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn to_precision<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds the tape understands, with their static parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum OpSpec {
    MatMul,
    /// `a · bᵀ` with `b` stored as `n x k`.
    MatMulNT,
    Add,
    Sub,
    Mul,
    Scale(f64),
    EmbeddingLookup(Vec<usize>),
    LayerNorm {
        eps: f64,
    },
    Gelu,
    Softmax,
    LogSoftmax,
    Log,
    Exp,
    Softplus,
    Reshape(Vec<usize>),
    /// Rows `start..end` along axis 0.
    Slice {
        start: usize,
        end: usize,
    },
    GatherRows(Vec<usize>),
    /// Gathers individual `(row, col)` entries of a matrix into a vector.
    Pick(Vec<(usize, usize)>),
    MaxOverAxis(usize),
    SumOverAxis(usize),
    Sum,
    CausalAttention {
        segments: Vec<(usize, usize)>,
        n_heads: usize,
    },
}

impl OpSpec {
    pub fn name(&self) -> &'static str {
        match self {
            OpSpec::MatMul => "matmul",
            OpSpec::MatMulNT => "matmul_nt",
            OpSpec::Add => "add",
            OpSpec::Sub => "sub",
            OpSpec::Mul => "mul",
            OpSpec::Scale(_) => "scale",
            OpSpec::EmbeddingLookup(_) => "embedding_lookup",
            OpSpec::LayerNorm { .. } => "layer_norm",
            OpSpec::Gelu => "gelu",
            OpSpec::Softmax => "softmax",
            OpSpec::LogSoftmax => "log_softmax",
            OpSpec::Log => "log",
            OpSpec::Exp => "exp",
            OpSpec::Softplus => "softplus",
            OpSpec::Reshape(_) => "reshape",
            OpSpec::Slice { .. } => "slice",
            OpSpec::GatherRows(_) => "gather_rows",
            OpSpec::Pick(_) => "pick",
            OpSpec::MaxOverAxis(_) => "max_over_axis",
            OpSpec::SumOverAxis(_) => "sum_over_axis",
            OpSpec::Sum => "sum",
            OpSpec::CausalAttention { .. } => "causal_attention",
        }
    }
}

/// Per-op data kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Saved<T> {
    None,
    /// Argmax positions for max-reductions.
    Indices(Vec<usize>),
    /// Row statistics or attention probabilities.
    Values(Vec<T>),
}

#[derive(Clone, Debug)]
struct Lineage<T> {
    op: OpSpec,
    inputs: Vec<Var>,
    saved: Saved<T>,
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    lineage: Option<Lineage<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeOptions {
    /// Record lineage for operations whose inputs require gradients.
    pub record: bool,
    /// Reject non-finite inputs and a second `backward` without a reset.
    pub strict: bool,
}

impl Default for TapeOptions {
    fn default() -> Self {
        Self {
            record: true,
            strict: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardReport {
    /// Number of recorded operations whose backward rule ran.
    pub visited_ops: usize,
}

/// Wengert list of tensors and the operations that produced them.
#[derive(Clone, Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    options: TapeOptions,
    backward_runs: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_options(TapeOptions::default())
    }

    /// Tape that never records lineage; useful for pure evaluation.
    pub fn no_grad() -> Self {
        Self::with_options(TapeOptions {
            record: false,
            strict: true,
        })
    }

    pub fn with_options(options: TapeOptions) -> Self {
        Self {
            nodes: Vec::new(),
            options,
            backward_runs: 0,
        }
    }

    pub fn options(&self) -> TapeOptions {
        self.options
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes produced by a recorded operation.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.lineage.is_some()).count()
    }

    /// Drops every node, freeing all lineage.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.backward_runs = 0;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.options.record;
        self.nodes.push(Node {
            value,
            lineage: None,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn has_lineage(&self, v: Var) -> bool {
        self.nodes[v.0].lineage.is_some()
    }

    /// Clears all gradient buffers so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_runs = 0;
    }

    pub fn forward_op(&mut self, spec: &OpSpec, inputs: &[Var]) -> Result<Var> {
        let name = spec.name();
        let arity = ops::arity(spec);
        if inputs.len() != arity {
            return Err(AutogradError::InvalidArgument {
                op: name,
                detail: format!("expected {arity} inputs, got {}", inputs.len()),
            });
        }
        if self.options.strict {
            for &v in inputs {
                if self.nodes[v.0].value.data.iter().any(|x| !x.is_finite()) {
                    return Err(AutogradError::NonFinite { op: name });
                }
            }
        }
        let (value, saved) = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            ops::forward(spec, &vals)?
        };
        let requires_grad =
            self.options.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let lineage = requires_grad.then(|| Lineage {
            op: spec.clone(),
            inputs: inputs.to_vec(),
            saved,
        });
        self.nodes.push(Node {
            value,
            lineage,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Runs reverse accumulation from a scalar root.
    ///
    /// In strict mode a second call without [`Tape::reset_grads`] errors; in
    /// lenient mode gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<BackwardReport> {
        let root_node = &self.nodes[root.0];
        if !root_node.value.is_scalar() {
            return Err(AutogradError::NonScalarRoot(root_node.value.shape.clone()));
        }
        if root_node.lineage.is_none() {
            return Err(AutogradError::NoLineage);
        }
        if self.options.strict && self.backward_runs > 0 {
            return Err(AutogradError::AlreadyBackpropagated);
        }
        self.backward_runs += 1;
        // interior gradients are per pass; only leaves accumulate across passes
        for node in &mut self.nodes {
            if node.lineage.is_some() {
                node.grad = None;
            }
        }
        accumulate(&mut self.nodes[root.0].grad, &[T::one()]);

        let mut visited = 0;
        for i in (0..=root.0).rev() {
            if self.nodes[i].lineage.is_none() || self.nodes[i].grad.is_none() {
                continue;
            }
            visited += 1;
            let input_grads = {
                let node = &self.nodes[i];
                let lineage = node.lineage.as_ref().expect("checked above");
                let inputs: Vec<&Tensor<T>> = lineage
                    .inputs
                    .iter()
                    .map(|v| &self.nodes[v.0].value)
                    .collect();
                let needs: Vec<bool> = lineage
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect();
                ops::backward(
                    &lineage.op,
                    &lineage.saved,
                    &inputs,
                    &node.value,
                    node.grad.as_deref().expect("checked above"),
                    &needs,
                )
            };
            let targets = self.nodes[i]
                .lineage
                .as_ref()
                .expect("checked above")
                .inputs
                .clone();
            for (target, g) in targets.into_iter().zip(input_grads) {
                if let Some(g) = g {
                    accumulate(&mut self.nodes[target.0].grad, &g);
                }
            }
        }
        Ok(BackwardReport {
            visited_ops: visited,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(&OpSpec::MatMul, &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(&OpSpec::MatMulNT, &[a, b])
    }

    /// Elementwise sum; `b` may also be a vector matching the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(&OpSpec::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(&OpSpec::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(&OpSpec::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.forward_op(&OpSpec::Scale(factor), &[a])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.forward_op(&OpSpec::EmbeddingLookup(ids.to_vec()), &[table])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.forward_op(&OpSpec::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.forward_op(&OpSpec::Gelu, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.forward_op(&OpSpec::Softmax, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.forward_op(&OpSpec::LogSoftmax, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.forward_op(&OpSpec::Log, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.forward_op(&OpSpec::Exp, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.forward_op(&OpSpec::Softplus, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.forward_op(&OpSpec::Reshape(shape.to_vec()), &[x])
    }

    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.forward_op(&OpSpec::Slice { start, end }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.forward_op(&OpSpec::GatherRows(rows.to_vec()), &[x])
    }

    pub fn pick(&mut self, x: Var, entries: &[(usize, usize)]) -> Result<Var> {
        self.forward_op(&OpSpec::Pick(entries.to_vec()), &[x])
    }

    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.forward_op(&OpSpec::MaxOverAxis(axis), &[x])
    }

    pub fn sum_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.forward_op(&OpSpec::SumOverAxis(axis), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.forward_op(&OpSpec::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Multi-head causal self-attention applied independently to each
    /// `(start, len)` row segment of `q`, `k` and `v`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        n_heads: usize,
    ) -> Result<Var> {
        self.forward_op(
            &OpSpec::CausalAttention {
                segments: segments.to_vec(),
                n_heads,
            },
            &[q, k, v],
        )
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests;
