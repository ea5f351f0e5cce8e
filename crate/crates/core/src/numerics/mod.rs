//! Dense-tensor substrate with reverse-mode gradients.
//!
//! Everything above this module (encoder, pooling, losses) is expressed in
//! these operations. Math is generic over the scalar type; the rest of the
//! crate uses the `f64` aliases exported from the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign, NumCast, ToPrimitive};
use thiserror::Error;

pub mod check;
pub mod tape;

pub use check::grad_check;
pub use tape::{Gradients, NodeId, ParamStore, Tape};

/// Floating-point scalar usable in tensors: f32 or f64.
pub trait Scalar: Float + NumAssign + NumCast + Debug + Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("scalar conversion")
    }

    fn to_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar conversion")
    }
}

impl<T> Scalar for T where T: Float + NumAssign + NumCast + Debug + Display + Send + Sync + 'static {}

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("parameter error in {op}: {detail}")]
    Parameter { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("degenerate input in {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },
    #[error("evaluation error in {op}: {detail}")]
    Evaluation { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Immutable dense tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::Dimension {
                op: "tensor",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| Scalar::to_f64(v)).collect()
    }
}

// ── Raw kernels shared by the tape and the value-level ops ─────────────

pub(crate) fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Row-wise softmax with temperature and optional column mask
/// (masked columns get weight 0). Max-subtraction for stability.
pub(crate) fn softmax_rows_kernel<S: Scalar>(
    x: &[S],
    rows: usize,
    cols: usize,
    temp: S,
    mask: Option<&[bool]>,
) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mut mx = S::neg_infinity();
        for j in 0..cols {
            if mask.map_or(true, |m| !m[j]) && xr[j] > mx {
                mx = xr[j];
            }
        }
        let mut denom = S::zero();
        let orow = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            if mask.map_or(true, |m| !m[j]) {
                let e = ((xr[j] - mx) / temp).exp();
                orow[j] = e;
                denom += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= denom;
        }
    }
    out
}

pub(crate) fn gelu_kernel<S: Scalar>(x: S) -> S {
    // tanh approximation
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_kernel<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

// ── Value-level operations ──────────────────────────────────────────────

/// Plain matrix product of two 2-D tensors.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(NumericsError::Dimension {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    Tensor::from_vec(vec![m, n], matmul_kernel(a.data(), b.data(), m, k, n))
}

/// Softmax along `axis` (0 or 1 for 2-D input; a 1-D tensor is treated as
/// one row) with temperature.
pub fn softmax<S: Scalar>(v: &Tensor<S>, axis: usize, temperature: S) -> Result<Tensor<S>> {
    if temperature <= S::zero() {
        return Err(NumericsError::Parameter {
            op: "softmax",
            detail: format!("temperature must be > 0, got {}", temperature),
        });
    }
    match v.shape().len() {
        1 => {
            let out = softmax_rows_kernel(v.data(), 1, v.len(), temperature, None);
            Tensor::from_vec(v.shape().to_vec(), out)
        }
        2 if axis == 1 => {
            let out = softmax_rows_kernel(v.data(), v.rows(), v.cols(), temperature, None);
            Tensor::from_vec(v.shape().to_vec(), out)
        }
        2 if axis == 0 => {
            let t = transpose_values(v);
            let out = softmax_rows_kernel(&t, v.cols(), v.rows(), temperature, None);
            let mut back = vec![S::zero(); v.len()];
            for r in 0..v.cols() {
                for c in 0..v.rows() {
                    back[c * v.cols() + r] = out[r * v.rows() + c];
                }
            }
            Tensor::from_vec(v.shape().to_vec(), back)
        }
        _ => Err(NumericsError::Dimension {
            op: "softmax",
            detail: format!("axis {} for shape {:?}", axis, v.shape()),
        }),
    }
}

fn transpose_values<S: Scalar>(a: &Tensor<S>) -> Vec<S> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    out
}

/// Cosine similarity of two equal-length vectors. Errors on zero norm.
pub fn cosine_similarity<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() || a.is_empty() {
        return Err(NumericsError::Dimension {
            op: "cosine_similarity",
            detail: format!("lengths {} vs {}", a.len(), b.len()),
        });
    }
    let mut dot = S::zero();
    let mut na = S::zero();
    let mut nb = S::zero();
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == S::zero() || nb == S::zero() {
        return Err(NumericsError::DegenerateInput {
            op: "cosine_similarity",
            detail: "zero-norm input".into(),
        });
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

pub fn l2_norm<S: Scalar>(a: &[S]) -> S {
    a.iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt()
}
