//! Grayscale images, integer label masks and their tensor encodings.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of anatomical classes: background, right lung, left lung, heart.
pub const NUM_CLASSES: usize = 4;

/// Single-channel image with intensities in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("image", format!("{height}x{width} needs {} values, got {}", height * width, data.len())));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Image { height, width, data: vec![v; height * width] }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// (1, H, W, 1) tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.height, self.width, 1], |i| T::from_f64c(self.data[i] as f64))
    }

    /// Batch item `index` of an (N, H, W, 1) tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, h, w, c) = t.nhwc()?;
        if c != 1 || index >= n {
            return Err(Error::shape("image", format!("cannot take item {index} of {:?} as an image", t.shape())));
        }
        let data = t.data()[index * h * w..(index + 1) * h * w].iter().map(|v| v.to_f64c() as f32).collect();
        Ok(Image { height: h, width: w, data })
    }
}

/// Integer label per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("label mask", format!("{height}x{width} needs {} labels, got {}", height * width, labels.len())));
        }
        Ok(LabelMask { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMask { height, width, labels: vec![label; height * width] }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Number of pixels whose labels differ.
    pub fn diff_count(&self, other: &LabelMask) -> usize {
        self.labels.iter().zip(&other.labels).filter(|(a, b)| a != b).count()
    }

    /// (1, H, W, C) hard one-hot encoding.
    pub fn to_onehot<T: Scalar>(&self, num_classes: usize) -> Result<Tensor<T>> {
        let mut data = vec![T::zero(); self.labels.len() * num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            if l as usize >= num_classes {
                return Err(Error::LabelOutOfRange {
                    value: l as u32,
                    row: i / self.width,
                    col: i % self.width,
                    num_classes,
                });
            }
            data[i * num_classes + l as usize] = T::one();
        }
        Tensor::new(&[1, self.height, self.width, num_classes], data)
    }
}

/// Stack one-hot encodings of several masks into an (N, H, W, C) batch.
pub fn onehot_batch<T: Scalar>(masks: &[&LabelMask], num_classes: usize) -> Result<Tensor<T>> {
    let items = masks.iter().map(|m| m.to_onehot(num_classes)).collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&items)
}

pub fn image_batch<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = images.iter().map(|im| im.to_tensor()).collect();
    Tensor::stack_batch(&items)
}
