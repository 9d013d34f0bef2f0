//! Dense NHWC tensors, the reverse-mode tape, and the Adam optimizer.

mod adam;
pub mod container;
mod elementwise;
mod nn;
mod param;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use nn::{BatchStats, BnStats, Conv2dSpec, Mode};
pub use param::{init_bias, init_weight, Param, ParamKey, ParamSet};
pub use tape::{Backward, BackwardCtx, GradSink, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array of rank 1 to 4; rank-4 tensors use (batch, height, width, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        check_shape(shape).expect("valid shape");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_shape(shape).expect("valid shape");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Extents of a rank-4 tensor as (n, h, w, c).
    pub fn nhwc(&self) -> Result<(usize, usize, usize, usize)> {
        nhwc_of(&self.shape, "nhwc")
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Batch item `i` of a rank-4 tensor, keeping a unit batch axis.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let (n, h, w, c) = self.nhwc()?;
        if i >= n {
            return Err(Error::arg("batch_item", format!("index {i} out of {n}")));
        }
        let sz = h * w * c;
        Ok(Tensor { shape: vec![1, h, w, c], data: self.data[i * sz..(i + 1) * sz].to_vec() })
    }

    /// Concatenate rank-4 tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Empty("stack_batch".into()))?;
        let (_, h, w, c) = first.nhwc()?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let (tn, th, tw, tc) = t.nhwc()?;
            if (th, tw, tc) != (h, w, c) {
                return Err(Error::shape("stack_batch", format!("{:?} vs {:?}", t.shape, first.shape)));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: vec![n, h, w, c], data })
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 || shape.iter().any(|&e| e == 0) {
        return Err(Error::shape("tensor", format!("rank 1-4 with positive extents required, got {shape:?}")));
    }
    Ok(())
}

pub fn nhwc_of(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::shape(op, format!("expected rank-4 NHWC input, got {shape:?}"))),
    }
}
