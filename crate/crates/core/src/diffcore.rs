//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records a fixed set of primitives (matrix products, elementwise
//! arithmetic, softmax, masked max-reduce, index gathers, concatenation) while
//! the forward values are computed eagerly. [`Tape::backward`] walks the record
//! once in reverse and returns gradients for every [`ParamStore`] entry the
//! program touched. Everything is `f64`.
//!
//! There is no graph compiler and no control flow on the tape: model code is
//! ordinary Rust that calls tape methods.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tensor data has {len} values, shape {rows}x{cols} needs {}", rows * cols)]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` is already registered")]
    DuplicateParam(String),
    #[error("parameter `{name}` has shape {expected:?}, got {actual:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value in parameter `{0}`")]
    NonFiniteParam(String),
    #[error("gather index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("backward needs a 1x1 output or an explicit cotangent")]
    NonScalarOutput,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DiffError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(DiffError::BadLength {
                    rows: rows.len(),
                    cols,
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: (self.rows, self.cols),
                right: (rows, cols),
            });
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = alpha·op(A)·op(B) + beta·C` for row-major buffers, with transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above pin every buffer to the extents implied by
    // (m, k, n) and the chosen strides, so all accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(DiffError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, false, &b.data, false, &mut out.data, 0.0);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parameters and optimizer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct Param {
    shape: Vec<usize>,
    value: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [init @ .., last] => (init.iter().product(), *last),
    }
}

/// Named parameter arrays plus per-parameter Adam state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Adam moments for one parameter, for resuming training exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        let (rows, cols) = matrix_dims(shape);
        let value = Tensor::new(rows, cols, values)?;
        if !value.is_finite() {
            return Err(DiffError::NonFiniteParam(name.to_string()));
        }
        let n = value.data.len();
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                value,
                first_moment: vec![0.0; n],
                second_moment: vec![0.0; n],
                step: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.params.get(name).map(|p| p.shape.as_slice())
    }

    pub fn step(&self, name: &str) -> Option<u64> {
        self.params.get(name).map(|p| p.step)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.data.len()).sum()
    }

    /// Overwrites one entry; used by finite-difference checks.
    pub fn set_entry(&mut self, name: &str, index: usize, value: f64) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        p.value.data[index] = value;
        Ok(())
    }

    pub fn moments(&self, name: &str) -> Option<MomentState> {
        self.params.get(name).map(|p| MomentState {
            first: p.first_moment.clone(),
            second: p.second_moment.clone(),
            step: p.step,
        })
    }

    pub fn set_moments(&mut self, name: &str, state: MomentState) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        if state.first.len() != p.value.data.len() || state.second.len() != p.value.data.len() {
            return Err(DiffError::Checkpoint(format!("moment length mismatch for `{name}`")));
        }
        p.first_moment = state.first;
        p.second_moment = state.second;
        p.step = state.step;
        Ok(())
    }

    /// Checks that `other` declares exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, p) in &self.params {
            match other.params.get(name) {
                None => return Err(DiffError::UnknownParam(name.clone())),
                Some(q) if q.shape != p.shape => {
                    return Err(DiffError::ParamShape {
                        name: name.clone(),
                        expected: p.shape.clone(),
                        actual: q.shape.clone(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = other.params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(DiffError::UnknownParam(extra.clone()));
        }
        Ok(())
    }

    /// `{name → {shape, values}}`, values row-major, shortest round-trip decimals.
    pub fn to_json(&self) -> String {
        let doc: BTreeMap<&str, CheckpointEntry> = self
            .params
            .iter()
            .map(|(k, p)| {
                (
                    k.as_str(),
                    CheckpointEntry {
                        shape: p.shape.clone(),
                        values: p.value.data.clone(),
                    },
                )
            })
            .collect();
        serde_json::to_string(&doc).expect("checkpoint entries are plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: BTreeMap<String, CheckpointEntry> =
            serde_json::from_str(text).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        let mut store = ParamStore::new();
        for (name, entry) in doc {
            store.register(&name, &entry.shape, entry.values)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched (including their step count). Any non-finite gradient
/// aborts the whole update before anything is modified.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
    for (name, g) in &grads.by_name {
        let p = store
            .params
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.clone()))?;
        if g.shape() != p.value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "adam_step",
                left: p.value.shape(),
                right: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(DiffError::NonFiniteGradient(name.clone()));
        }
    }
    for (name, g) in &grads.by_name {
        let p = store.params.get_mut(name).expect("checked above");
        p.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(p.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(p.step as i32);
        for (i, &gi) in g.data.iter().enumerate() {
            let m = ADAM_BETA1 * p.first_moment[i] + (1.0 - ADAM_BETA1) * gi;
            let v = ADAM_BETA2 * p.second_moment[i] + (1.0 - ADAM_BETA2) * gi * gi;
            p.first_moment[i] = m;
            p.second_moment[i] = v;
            p.value.data[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
        }
        if !p.value.is_finite() {
            return Err(DiffError::NonFiniteParam(name.clone()));
        }
    }
    Ok(())
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn insert(&mut self, name: &str, g: Tensor) {
        self.by_name.insert(name.to_string(), g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_finite(&self) -> bool {
        self.by_name.values().all(Tensor::is_finite)
    }

    /// Accumulates `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, v) in &other.by_name {
            match self.by_name.get_mut(k) {
                Some(t) => t.add_assign(v),
                None => {
                    self.by_name.insert(k.clone(), v.clone());
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    LeakyRelu(Var, f64),
    Sqrt(Var),
    Recip(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MaxRows {
        input: Var,
        mask: Option<Var>,
        argmax: Vec<usize>,
    },
    Gather {
        input: Var,
        indices: Arc<[usize]>,
        fanout: usize,
        scale: f64,
    },
    GroupSumRows(Var, usize),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumAll(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive evaluations. Acyclic by construction: every
/// node only refers to earlier nodes.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

macro_rules! shape_check {
    ($op:expr, $a:expr, $b:expr, $ok:expr) => {
        if !$ok {
            return Err(DiffError::ShapeMismatch {
                op: $op,
                left: $a,
                right: $b,
            });
        }
    };
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input or constant; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records (once per tape) the current value of a named parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        shape_check!("matmul_t", ta.shape(), tb.shape(), ta.cols == tb.cols);
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        gemm(ta.rows, ta.cols, tb.rows, &ta.data, false, &tb.data, true, &mut out.data, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        shape_check!(name, ta.shape(), tb.shape(), ta.shape() == tb.shape());
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        shape_check!("add_row", ta.shape(), tr.shape(), tr.rows == 1 && tr.cols == ta.cols);
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&tr.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Scales row `r` of `a` by `col[r]` (`col` is `rows×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        shape_check!("mul_col", ta.shape(), tc.shape(), tc.cols == 1 && tc.rows == ta.rows);
        let mut out = ta.clone();
        for r in 0..out.rows {
            let s = tc.data[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(out, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    /// Multiplies `a` by the `1×1` value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        shape_check!("mul_scalar", ta.shape(), ts.shape(), ts.shape() == (1, 1));
        let k = ts.data[0];
        let mut out = ta.clone();
        out.data.iter_mut().for_each(|x| *x *= k);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::MulScalar(a, s), ng))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let out = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|x| f(*x)).collect(),
        };
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    /// Column-wise maximum over rows: `1×c`. Ties go to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::filled(1, ta.cols, f64::NEG_INFINITY);
        let mut argmax = vec![0usize; ta.cols];
        for r in 0..ta.rows {
            for (c, &x) in ta.row(r).iter().enumerate() {
                if x > out.data[c] {
                    out.data[c] = x;
                    argmax[c] = r;
                }
            }
        }
        let ng = self.ng(a);
        self.push(
            out,
            Op::MaxRows {
                input: a,
                mask: None,
                argmax,
            },
            ng,
        )
    }

    /// `out[s, c] = max_i mask[i, s] · a[i, c]`, one output row per mask
    /// column. Ties go to the lowest row.
    pub fn masked_max_rows(&mut self, a: Var, mask: Var) -> Result<Var> {
        let (ta, tm) = (self.value(a), self.value(mask));
        shape_check!("masked_max_rows", ta.shape(), tm.shape(), ta.rows == tm.rows);
        let slots = tm.cols;
        let mut out = Tensor::filled(slots, ta.cols, f64::NEG_INFINITY);
        let mut argmax = vec![0usize; slots * ta.cols];
        for r in 0..ta.rows {
            let xs = ta.row(r);
            for s in 0..slots {
                let w = tm.data[r * slots + s];
                let orow = &mut out.data[s * ta.cols..(s + 1) * ta.cols];
                let arow = &mut argmax[s * ta.cols..(s + 1) * ta.cols];
                for c in 0..xs.len() {
                    let x = w * xs[c];
                    if x > orow[c] {
                        orow[c] = x;
                        arow[c] = r;
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(mask);
        Ok(self.push(
            out,
            Op::MaxRows {
                input: a,
                mask: Some(mask),
                argmax,
            },
            ng,
        ))
    }

    /// `out[r] = scale · Σ_f a[indices[r·fanout + f]]` (row gather with a
    /// fixed fan-in). With `fanout = 1, scale = 1` this is a plain gather.
    pub fn gather_rows(&mut self, a: Var, indices: Arc<[usize]>, fanout: usize, scale: f64) -> Result<Var> {
        let ta = self.value(a);
        assert!(fanout > 0 && indices.len() % fanout == 0, "gather fan-out must divide index count");
        if let Some(&index) = indices.iter().find(|&&i| i >= ta.rows) {
            return Err(DiffError::IndexOutOfRange { index, rows: ta.rows });
        }
        let rows = indices.len() / fanout;
        let cols = ta.cols;
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let orow = &mut out.data[r * cols..(r + 1) * cols];
            for &q in &indices[r * fanout..(r + 1) * fanout] {
                for (o, x) in orow.iter_mut().zip(ta.row(q)) {
                    *o += x;
                }
            }
            if scale != 1.0 {
                orow.iter_mut().for_each(|o| *o *= scale);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            out,
            Op::Gather {
                input: a,
                indices,
                fanout,
                scale,
            },
            ng,
        ))
    }

    /// Sums consecutive blocks of `group` rows: `(n·group)×c → n×c`.
    pub fn group_sum_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let ta = self.value(a);
        shape_check!("group_sum_rows", ta.shape(), (group, 0), group > 0 && ta.rows % group == 0);
        let n = ta.rows / group;
        let mut out = Tensor::zeros(n, ta.cols);
        for r in 0..ta.rows {
            let g = r / group;
            for (o, x) in out.data[g * ta.cols..(g + 1) * ta.cols].iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::GroupSumRows(a, group), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshaped(rows, cols)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            shape_check!("concat_cols", (rows, 0), self.shape(p), self.shape(p).0 == rows);
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.data[r * cols + off..r * cols + off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        for &p in parts {
            shape_check!("concat_rows", (0, cols), self.shape(p), self.shape(p).1 == cols);
            data.extend_from_slice(&self.value(p).data);
        }
        let rows = data.len() / cols.max(1);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Sum of `a ⊙ c` for a constant tensor `c`.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let w = self.constant(weights);
        let prod = self.mul(a, w)?;
        Ok(self.sum(prod))
    }

    /// Reverse pass from a `1×1` output with cotangent 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(DiffError::NonScalarOutput);
        }
        self.backward_with(output, Tensor::scalar(1.0))
    }

    /// Reverse pass with an explicit output cotangent. Each node is visited
    /// exactly once, in reverse recording order.
    pub fn backward_with(&self, output: Var, cotangent: Tensor) -> Result<Gradients> {
        if cotangent.shape() != self.shape(output) {
            return Err(DiffError::ShapeMismatch {
                op: "backward",
                left: self.shape(output),
                right: cotangent.shape(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(cotangent);
        let mut result = Gradients::default();

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => result.insert(name, g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let acc = slot(&mut grads, *a, ta.shape());
                        gemm(ta.rows, g.cols, ta.cols, &g.data, false, &tb.data, true, &mut acc.data, 1.0);
                    }
                    if self.ng(*b) {
                        let acc = slot(&mut grads, *b, tb.shape());
                        gemm(tb.rows, ta.rows, tb.cols, &ta.data, true, &g.data, false, &mut acc.data, 1.0);
                    }
                }
                Op::MatMulT(a, b) => {
                    // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let acc = slot(&mut grads, *a, ta.shape());
                        gemm(ta.rows, tb.rows, ta.cols, &g.data, false, &tb.data, false, &mut acc.data, 1.0);
                    }
                    if self.ng(*b) {
                        let acc = slot(&mut grads, *b, tb.shape());
                        gemm(tb.rows, ta.rows, tb.cols, &g.data, true, &ta.data, false, &mut acc.data, 1.0);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.ng(v) {
                            slot(&mut grads, v, g.shape()).add_assign(&g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        slot(&mut grads, *a, g.shape()).add_assign(&g);
                    }
                    if self.ng(*b) {
                        let acc = slot(&mut grads, *b, g.shape());
                        acc.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x -= y);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let acc = slot(&mut grads, *a, ta.shape());
                        for i in 0..g.data.len() {
                            acc.data[i] += g.data[i] * tb.data[i];
                        }
                    }
                    if self.ng(*b) {
                        let acc = slot(&mut grads, *b, tb.shape());
                        for i in 0..g.data.len() {
                            acc.data[i] += g.data[i] * ta.data[i];
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*a) {
                        slot(&mut grads, *a, g.shape()).add_assign(&g);
                    }
                    if self.ng(*row) {
                        let acc = slot(&mut grads, *row, (1, g.cols));
                        for r in 0..g.rows {
                            for (x, y) in acc.data.iter_mut().zip(g.row(r)) {
                                *x += y;
                            }
                        }
                    }
                }
                Op::MulCol(a, col) => {
                    let (ta, tc) = (self.value(*a), self.value(*col));
                    if self.ng(*a) {
                        let acc = slot(&mut grads, *a, ta.shape());
                        for r in 0..g.rows {
                            let s = tc.data[r];
                            for (x, y) in acc.row_mut(r).iter_mut().zip(g.row(r)) {
                                *x += y * s;
                            }
                        }
                    }
                    if self.ng(*col) {
                        let acc = slot(&mut grads, *col, tc.shape());
                        for r in 0..g.rows {
                            acc.data[r] += g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                Op::Scale(a, k) => {
                    let acc = slot(&mut grads, *a, g.shape());
                    acc.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += k * y);
                }
                Op::MulScalar(a, s) => {
                    let (ta, ts) = (self.value(*a), self.value(*s));
                    if self.ng(*a) {
                        let k = ts.data[0];
                        let acc = slot(&mut grads, *a, ta.shape());
                        acc.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += k * y);
                    }
                    if self.ng(*s) {
                        let d: f64 = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).sum();
                        slot(&mut grads, *s, (1, 1)).data[0] += d;
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let ta = self.value(*a);
                    let acc = slot(&mut grads, *a, ta.shape());
                    for i in 0..g.data.len() {
                        acc.data[i] += if ta.data[i] > 0.0 { g.data[i] } else { slope * g.data[i] };
                    }
                }
                Op::Sqrt(a) => {
                    let acc = slot(&mut grads, *a, g.shape());
                    for i in 0..g.data.len() {
                        acc.data[i] += g.data[i] / (2.0 * node.value.data[i]);
                    }
                }
                Op::Recip(a) => {
                    let acc = slot(&mut grads, *a, g.shape());
                    for i in 0..g.data.len() {
                        let y = node.value.data[i];
                        acc.data[i] -= g.data[i] * y * y;
                    }
                }
                Op::Log(a) => {
                    let ta = self.value(*a);
                    let acc = slot(&mut grads, *a, g.shape());
                    for i in 0..g.data.len() {
                        acc.data[i] += g.data[i] / ta.data[i];
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let acc = slot(&mut grads, *a, g.shape());
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (x, (p, q)) in acc.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *x += p * (q - dot);
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let acc = slot(&mut grads, *a, g.shape());
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        for (x, (ly, q)) in acc.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *x += q - ly.exp() * total;
                        }
                    }
                }
                Op::MaxRows { input, mask, argmax } => {
                    let tx = self.value(*input);
                    let cols = tx.cols;
                    match mask {
                        None => {
                            let acc = slot(&mut grads, *input, tx.shape());
                            for c in 0..cols {
                                acc.data[argmax[c] * cols + c] += g.data[c];
                            }
                        }
                        Some(m) => {
                            let tm = self.value(*m);
                            let slots = tm.cols;
                            if self.ng(*input) {
                                let acc = slot(&mut grads, *input, tx.shape());
                                for s in 0..slots {
                                    for c in 0..cols {
                                        let i = argmax[s * cols + c];
                                        acc.data[i * cols + c] += g.data[s * cols + c] * tm.data[i * slots + s];
                                    }
                                }
                            }
                            if self.ng(*m) {
                                let acc = slot(&mut grads, *m, tm.shape());
                                for s in 0..slots {
                                    for c in 0..cols {
                                        let i = argmax[s * cols + c];
                                        acc.data[i * slots + s] += g.data[s * cols + c] * tx.data[i * cols + c];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Gather {
                    input,
                    indices,
                    fanout,
                    scale,
                } => {
                    let shape = self.shape(*input);
                    let cols = g.cols;
                    let acc = slot(&mut grads, *input, shape);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        for &q in &indices[r * fanout..(r + 1) * fanout] {
                            for (x, y) in acc.data[q * cols..(q + 1) * cols].iter_mut().zip(gr) {
                                *x += scale * y;
                            }
                        }
                    }
                }
                Op::GroupSumRows(a, group) => {
                    let shape = self.shape(*a);
                    let acc = slot(&mut grads, *a, shape);
                    for r in 0..shape.0 {
                        let gr = g.row(r / group);
                        for (x, y) in acc.row_mut(r).iter_mut().zip(gr) {
                            *x += y;
                        }
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    let acc = slot(&mut grads, *a, shape);
                    acc.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        if self.ng(p) {
                            let acc = slot(&mut grads, p, (rows, cols));
                            for r in 0..rows {
                                let src = &g.row(r)[off..off + cols];
                                for (x, y) in acc.row_mut(r).iter_mut().zip(src) {
                                    *x += y;
                                }
                            }
                        }
                        off += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let shape = self.shape(p);
                        let n = shape.0 * shape.1;
                        if self.ng(p) {
                            let acc = slot(&mut grads, p, shape);
                            for (x, y) in acc.data.iter_mut().zip(&g.data[off..off + n]) {
                                *x += y;
                            }
                        }
                        off += n;
                    }
                }
                Op::SumAll(a) => {
                    let shape = self.shape(*a);
                    let acc = slot(&mut grads, *a, shape);
                    let k = g.data[0];
                    acc.data.iter_mut().for_each(|x| *x += k);
                }
            }
        }
        Ok(result)
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    xs.iter_mut().for_each(|x| *x /= total);
}

/// Runs `program` on a fresh tape with `inputs` recorded as constants and
/// returns the output values together with the tape for a later
/// [`Tape::backward`].
pub fn forward<F>(store: &ParamStore, inputs: &[Tensor], program: F) -> Result<(Vec<Tensor>, Tape)>
where
    F: FnOnce(&mut Tape, &ParamStore, &[Var]) -> Result<Vec<Var>>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let outs = program(&mut tape, store, &vars)?;
    let values = outs.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((values, tape))
}

/// Central finite-difference check of `loss` against reverse-mode gradients
/// on selected entries. Returns the worst relative error
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check<F, E>(
    store: &ParamStore,
    entries: &[(String, usize)],
    step: f64,
    floor: f64,
    loss: F,
) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, &ParamStore) -> std::result::Result<Var, E>,
    E: From<DiffError>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut scratch = store.clone();
    let mut worst = 0.0f64;
    for (name, idx) in entries {
        let base = store.get(name).ok_or_else(|| DiffError::UnknownParam(name.clone()))?.data()[*idx];
        let eval = |s: &ParamStore| -> std::result::Result<f64, E> {
            let mut t = Tape::new();
            let v = loss(&mut t, s)?;
            Ok(t.value(v).item())
        };
        scratch.set_entry(name, *idx, base + step)?;
        let up = eval(&scratch)?;
        scratch.set_entry(name, *idx, base - step)?;
        let down = eval(&scratch)?;
        scratch.set_entry(name, *idx, base)?;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[*idx]);
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
