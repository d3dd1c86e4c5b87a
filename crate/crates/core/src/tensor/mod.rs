//! Dense tensors and a small reverse-mode differentiation tape.
//!
//! [`Tensor`] is the value type used for parameters, features and file IO.
//! [`Tape`] records operations on [`Var`] handles and replays them backwards.

mod conv;
mod gemm;
mod gradcheck;
mod tape;

pub use conv::ConvGeom;
pub use gradcheck::finite_diff_check;
pub use tape::{Tape, Var};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::{fmt_sig17, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n]).expect("zeros: valid shape")
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n]).expect("full: valid shape")
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![1], vec![v]).expect("scalar")
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("from_vec: non-empty data")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }

    /// Serializes to the text format: a `shape:` header followed by one line
    /// per innermost row.
    pub fn to_text(&self) -> String {
        let mut out = String::from("shape:");
        for d in &self.shape {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
        let row = *self.shape.last().unwrap_or(&1);
        for chunk in self.data.chunks(row) {
            let line: Vec<String> = chunk.iter().map(|&v| fmt_sig17(v)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .by_ref()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| Error::parse("tensor", "empty input"))?;
        let dims = header
            .trim()
            .strip_prefix("shape:")
            .ok_or_else(|| Error::parse("tensor", format!("expected `shape:` header, got `{header}`")))?;
        let shape = dims
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| Error::parse("tensor shape", format!("`{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if shape.is_empty() {
            return Err(Error::parse("tensor shape", "no dimensions"));
        }
        let data = lines
            .flat_map(str::split_whitespace)
            .map(|t| {
                t.parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| Error::parse("tensor value", format!("`{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, data)
    }
}
