//! Dense row-major `f64` arrays and a tape that records whole-tensor
//! primitives for reverse-mode differentiation.
//!
//! Every value produced during a forward pass lives in a [`Graph`] and is
//! addressed by a copyable [`Var`] handle. Leaves are either constants or
//! parameters; [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients for every node that depends on a parameter.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("zero-sized dimension in shape {0:?}")]
    EmptyDimension(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Immutable dense array. Rank-1 tensors behave as single-row matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyDimension(shape.to_vec()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn checked(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("Tensor::checked"));
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::Invalid {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            self.shape[0]
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        gemm_nn(&self.data, &other.data, &mut out, n, k, m);
        Tensor::new(&[n, m], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

// out += a(n×k) · b(k×m)
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out += a(n×k) · b(m×k)ᵀ
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * m + j] += s;
        }
    }
}

// out += a(k×n)ᵀ · b(k×m)
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a[p * n + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    RepeatCols(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    Huber(Var, f64),
    BceProb {
        p: Var,
        target: Vec<f64>,
        eps: f64,
    },
    BceLogits {
        z: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        total: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::RepeatCols(..) => "repeat_cols",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::DivBy(..) => "div_by",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Softmax(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Transpose(..) => "transpose",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::GroupMax { .. } => "group_max",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::Huber(..) => "huber",
            Op::BceProb { .. } => "bce",
            Op::BceLogits { .. } => "bce_logits",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Logit used for positions excluded from a masked softmax.
pub const MASKED_LOGIT: f64 = -1e30;

/// Tape of recorded primitive applications.
///
/// Nodes are appended in evaluation order, so the vector itself is a
/// topological order and the backward pass is a single reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    checked: bool,
    branches: DefaultHasher,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: false,
            branches: DefaultHasher::new(),
        }
    }

    /// A graph that rejects any non-finite intermediate value.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Hash of every branch taken so far by piecewise ops (relu signs,
    /// group-max winners, Huber regimes, probability clamps) and by any
    /// discrete choice recorded with [`Graph::note_branch`]. Two evaluations
    /// with equal signatures ran the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches.finish()
    }

    pub fn note_branch(&mut self, choice: impl Hash) {
        choice.hash(&mut self.branches);
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked && value.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn same_numel(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_numel("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_numel("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_numel("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `x[i, j] + row[j]` for every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, c) = self.dims(x);
        if self.value(row).numel() != c {
            return Err(self.mismatch("add_row", x, row));
        }
        let b = self.value(row).data();
        let mut data = self.value(x).data.clone();
        for i in 0..n {
            for j in 0..c {
                data[i * c + j] += b[j];
            }
        }
        let out = Tensor::new(&[n, c], data)?;
        self.push(out, Op::AddRow(x, row), &[x, row])
    }

    /// `x[i, j] * col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (n, c) = self.dims(x);
        if self.value(col).numel() != n {
            return Err(self.mismatch("mul_col", x, col));
        }
        let m = self.value(col).data();
        let mut data = self.value(x).data.clone();
        for i in 0..n {
            for j in 0..c {
                data[i * c + j] *= m[i];
            }
        }
        let out = Tensor::new(&[n, c], data)?;
        self.push(out, Op::MulCol(x, col), &[x, col])
    }

    /// Repeats an `N×1` column `c` times into `N×c`.
    pub fn repeat_cols(&mut self, col: Var, c: usize) -> Result<Var> {
        let (n, w) = self.dims(col);
        if w != 1 || c == 0 {
            return Err(TensorError::Invalid {
                op: "repeat_cols",
                msg: format!("expected N×1 input and c>0, got N×{w}, c={c}"),
            });
        }
        let src = self.value(col).data();
        let data = (0..n * c).map(|k| src[k / c]).collect();
        let out = Tensor::new(&[n, c], data)?;
        self.push(out, Op::RepeatCols(col), &[col])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Multiplies every element by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(self.mismatch("scale_by", x, s));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::ScaleBy(x, s), &[x, s])
    }

    /// Divides every element by the one-element tensor `s`.
    pub fn div_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(self.mismatch("div_by", x, s));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v / k);
        self.push(out, Op::DivBy(x, s), &[x, s])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        for v in &self.nodes[x.0].value.data {
            (*v > 0.0).hash(&mut self.branches);
        }
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        if m == 0 {
            return Err(TensorError::EmptyDimension(t.shape.clone()));
        }
        let mut data = t.data.clone();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        let out = Tensor::new(&[n, m], data)?;
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, c) = self.dims(x);
        if self.value(gain).numel() != c {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.value(bias).numel() != c {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "eps must be positive".into(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(&[n, c], out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{} out of {c} columns", start + len),
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(&[n, len], data)?;
        self.push(out, Op::SliceCols(x, start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| TensorError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            })?;
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).0 != n) {
            return Err(self.mismatch("concat_cols", parts[0], bad));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[n, total], data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{} out of {n} rows", start + len),
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(&[len, c], data)?;
        self.push(out, Op::SliceRows(x, start), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            })?;
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).1 != c) {
            return Err(self.mismatch("concat_rows", parts[0], bad));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len() / c;
        let out = Tensor::new(&[n, c], data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Output row `i` is input row `idx[i]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.dims(x);
        if idx.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "empty index list".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("index {bad} out of {n} rows"),
            });
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::new(&[idx.len(), c], data)?;
        self.push(out, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Max over consecutive groups of `k` rows: `(N·k)×C → N×C`.
    /// Ties resolve to the earliest row in the group.
    pub fn group_max(&mut self, x: Var, k: usize) -> Result<Var> {
        let (rows, c) = self.dims(x);
        if k == 0 || rows % k != 0 {
            return Err(TensorError::Invalid {
                op: "group_max",
                msg: format!("{rows} rows not divisible into groups of {k}"),
            });
        }
        let n = rows / k;
        let src = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut argmax = vec![0usize; n * c];
        for g in 0..n {
            for r in 0..k {
                let row = g * k + r;
                for j in 0..c {
                    let v = src[row * c + j];
                    if v > out[g * c + j] {
                        out[g * c + j] = v;
                        argmax[g * c + j] = row;
                    }
                }
            }
        }
        argmax.hash(&mut self.branches);
        let out = Tensor::new(&[n, c], out)?;
        self.push(out, Op::GroupMax { x, argmax }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Row sums: `N×C → N×1`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims(x);
        let src = self.value(x).data();
        let data = (0..n).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        let out = Tensor::new(&[n, 1], data)?;
        self.push(out, Op::SumCols(x), &[x])
    }

    /// Elementwise Huber (smooth-L1) with threshold `delta`.
    pub fn huber(&mut self, x: Var, delta: f64) -> Result<Var> {
        if delta <= 0.0 {
            return Err(TensorError::Invalid {
                op: "huber",
                msg: "delta must be positive".into(),
            });
        }
        for e in &self.nodes[x.0].value.data {
            (e.abs() <= delta).hash(&mut self.branches);
        }
        let out = self.value(x).map(|e| huber(e, delta));
        self.push(out, Op::Huber(x, delta), &[x])
    }

    /// Mean binary cross-entropy of probabilities against fixed targets.
    /// Probabilities are clamped to `[eps, 1 - eps]`; the clamp has zero slope.
    pub fn bce(&mut self, p: Var, target: &[f64], eps: f64) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != target.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                lhs: t.shape.clone(),
                rhs: vec![target.len()],
            });
        }
        let clamps: Vec<i8> = t.data.iter().map(|&q| if q < eps { -1 } else { i8::from(q > 1.0 - eps) }).collect();
        let n = target.len() as f64;
        let loss = t
            .data
            .iter()
            .zip(target)
            .map(|(&q, &y)| {
                let q = q.clamp(eps, 1.0 - eps);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        self.note_branch(clamps);
        self.push(
            Tensor::scalar(loss),
            Op::BceProb {
                p,
                target: target.to_vec(),
                eps,
            },
            &[p],
        )
    }

    /// Weighted mean binary cross-entropy on logits:
    /// `Σ w·ℓ(z, y) / Σ w`, or zero when every weight is zero.
    pub fn bce_logits(&mut self, z: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        let t = self.value(z);
        if t.numel() != target.len() || t.numel() != weight.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_logits",
                lhs: t.shape.clone(),
                rhs: vec![target.len(), weight.len()],
            });
        }
        let total: f64 = weight.iter().sum();
        let loss = if total > 0.0 {
            t.data
                .iter()
                .zip(target)
                .zip(weight)
                .map(|((&z, &y), &w)| w * bce_with_logit(z, y))
                .sum::<f64>()
                / total
        } else {
            0.0
        };
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                z,
                target: target.to_vec(),
                weight: weight.to_vec(),
                total,
            },
            &[z],
        )
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Reverse sweep from a one-element output, seeding its gradient with 1.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(out).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    gemm_nt(gy, &tb.data, ga, n, m, k);
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(grads, *b);
                    gemm_tn(&ta.data, gy, gb, n, k, m);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| axpy(g, gy, 1.0));
                self.accumulate(grads, *b, |g| axpy(g, gy, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| axpy(g, gy, 1.0));
                self.accumulate(grads, *b, |g| axpy(g, gy, -1.0));
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.value(*a).data, &self.value(*b).data);
                self.accumulate(grads, *a, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(db) {
                        *g += d * o;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(da) {
                        *g += d * o;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let c = y.cols();
                self.accumulate(grads, *x, |g| axpy(g, gy, 1.0));
                self.accumulate(grads, *row, |g| {
                    for chunk in gy.chunks(c) {
                        axpy(g, chunk, 1.0);
                    }
                });
            }
            Op::MulCol(x, col) => {
                let c = y.cols();
                let m = &self.value(*col).data;
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |g| {
                    for (i, (gr, dr)) in g.chunks_mut(c).zip(gy.chunks(c)).enumerate() {
                        axpy(gr, dr, m[i]);
                    }
                });
                self.accumulate(grads, *col, |g| {
                    for (i, (dr, xr)) in gy.chunks(c).zip(xv.chunks(c)).enumerate() {
                        g[i] += dot(dr, xr);
                    }
                });
            }
            Op::RepeatCols(col) => {
                let c = y.cols();
                self.accumulate(grads, *col, |g| {
                    for (i, dr) in gy.chunks(c).enumerate() {
                        g[i] += dr.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, |g| axpy(g, gy, *s)),
            Op::ScaleBy(x, s) => {
                let k = self.value(*s).item();
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |g| axpy(g, gy, k));
                self.accumulate(grads, *s, |g| g[0] += dot(gy, xv));
            }
            Op::DivBy(x, s) => {
                let k = self.value(*s).item();
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |g| axpy(g, gy, 1.0 / k));
                self.accumulate(grads, *s, |g| g[0] -= dot(gy, xv) / (k * k));
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(xv) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, |g| {
                for ((g, &d), &s) in g.iter_mut().zip(gy).zip(&y.data) {
                    *g += d * s * (1.0 - s);
                }
            }),
            Op::Exp(x) => self.accumulate(grads, *x, |g| {
                for ((g, &d), &e) in g.iter_mut().zip(gy).zip(&y.data) {
                    *g += d * e;
                }
            }),
            Op::Square(x) => {
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(xv) {
                        *g += 2.0 * d * v;
                    }
                });
            }
            Op::Softmax(x) => {
                let m = y.cols();
                self.accumulate(grads, *x, |g| {
                    for ((gr, dr), yr) in g.chunks_mut(m).zip(gy.chunks(m)).zip(y.data.chunks(m)) {
                        let s = dot(dr, yr);
                        for ((g, &d), &p) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += p * (d - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = y.cols();
                let gv = &self.value(*gain).data;
                self.accumulate(grads, *x, |g| {
                    for (i, (gr, dr)) in g.chunks_mut(c).zip(gy.chunks(c)).enumerate() {
                        let hr = &xhat[i * c..(i + 1) * c];
                        let dh: Vec<f64> = dr.iter().zip(gv).map(|(d, w)| d * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dot(&dh, hr) / c as f64;
                        for j in 0..c {
                            gr[j] += rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                });
                self.accumulate(grads, *gain, |g| {
                    for (dr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |g| {
                    for dr in gy.chunks(c) {
                        axpy(g, dr, 1.0);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (y.rows(), y.cols());
                self.accumulate(grads, *x, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] += gy[i * c + j];
                        }
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let (n, len) = (y.rows(), y.cols());
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |g| {
                    for i in 0..n {
                        axpy(
                            &mut g[i * c + start..i * c + start + len],
                            &gy[i * len..(i + 1) * len],
                            1.0,
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |g| {
                        for (i, gr) in g.chunks_mut(w).enumerate() {
                            axpy(gr, &gy[i * total + offset..i * total + offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                let c = y.cols();
                self.accumulate(grads, *x, |g| {
                    axpy(&mut g[start * c..start * c + gy.len()], gy, 1.0);
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |g| axpy(g, &gy[offset..offset + len], 1.0));
                    offset += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let c = y.cols();
                self.accumulate(grads, *x, |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut g[i * c..(i + 1) * c], &gy[r * c..(r + 1) * c], 1.0);
                    }
                });
            }
            Op::GroupMax { x, argmax } => {
                let c = y.cols();
                self.accumulate(grads, *x, |g| {
                    for (k, &row) in argmax.iter().enumerate() {
                        g[row * c + k % c] += gy[k];
                    }
                });
            }
            Op::SumAll(x) => self.accumulate(grads, *x, |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                self.accumulate(grads, *x, |g| g.iter_mut().for_each(|v| *v += gy[0] / n));
            }
            Op::SumCols(x) => {
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |g| {
                    for (i, gr) in g.chunks_mut(c).enumerate() {
                        gr.iter_mut().for_each(|v| *v += gy[i]);
                    }
                });
            }
            Op::Huber(x, delta) => {
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |g| {
                    for ((g, &d), &e) in g.iter_mut().zip(gy).zip(xv) {
                        *g += d * e.clamp(-delta, *delta);
                    }
                });
            }
            Op::BceProb { p, target, eps } => {
                let pv = &self.value(*p).data;
                let n = target.len() as f64;
                self.accumulate(grads, *p, |g| {
                    for ((g, &q), &t) in g.iter_mut().zip(pv).zip(target) {
                        if q <= *eps || q >= 1.0 - eps {
                            continue;
                        }
                        *g += gy[0] * (-(t / q) + (1.0 - t) / (1.0 - q)) / n;
                    }
                });
            }
            Op::BceLogits {
                z,
                target,
                weight,
                total,
            } => {
                if *total > 0.0 {
                    let zv = &self.value(*z).data;
                    self.accumulate(grads, *z, |g| {
                        for (((g, &z), &t), &w) in g.iter_mut().zip(zv).zip(target).zip(weight) {
                            *g += gy[0] * w * (sigmoid(z) - t) / total;
                        }
                    });
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if self.requires_grad(v) {
            f(self.slot(grads, v));
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `-(y ln σ(z) + (1-y) ln(1-σ(z)))`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Plain (untaped) row softmax.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let m = x.cols();
    if m == 0 {
        return Err(TensorError::EmptyDimension(x.shape.clone()));
    }
    let mut data = x.data.clone();
    for row in data.chunks_mut(m) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape(), data)
}
