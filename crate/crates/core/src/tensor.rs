//! Dense row-major tensors. Values are plain data; differentiation state
//! lives on the tape in [`crate::graph`], never here.

use crate::scalar::Scalar;
use thiserror::Error;

/// Renders a shape as `2x3x4` for error messages.
pub fn fmt_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".to_string();
    }
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {} and {}", fmt_shape(lhs), fmt_shape(rhs))]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: bad shape {}: {detail}", fmt_shape(shape))]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("{op}: non-finite value produced")]
    NotFinite { op: &'static str },
    #[error("{op}: {detail}")]
    BadParam { op: &'static str, detail: String },
    #[error("cross_entropy: label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::BadShape {
                op: "tensor",
                shape: shape.clone(),
                detail: format!("holds {} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::ZERO; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    /// Product of all axes but the last: the row count when the tensor is
    /// viewed as a 2-d matrix of rows.
    pub fn leading(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_s())
    }

    /// Widening/narrowing copy between scalar widths.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Row-wise softmax of `x / temp` over the last axis, in place on a copy.
/// Shared by the tape op and by plain (constant-side) evaluations.
pub fn row_softmax_value<S: Scalar>(x: &Tensor<S>, temp: S) -> Tensor<S> {
    let d = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mut mx = row[0];
        for v in row.iter() {
            mx = mx.maxs(*v);
        }
        let mut z = S::ZERO;
        for v in row.iter_mut() {
            *v = ((*v - mx) / temp).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Elementwise mean of same-shaped tensors.
pub fn mean_of<S: Scalar>(parts: &[&Tensor<S>]) -> Tensor<S> {
    let mut out = parts[0].clone();
    for p in &parts[1..] {
        for (o, v) in out.data_mut().iter_mut().zip(p.data()) {
            *o += *v;
        }
    }
    let inv = S::ONE / S::from_f64(parts.len() as f64);
    for o in out.data_mut() {
        *o *= inv;
    }
    out
}
