//! Convolutional denoising autoencoder over 64x64 four-class masks.
//!
//! | stage    | layers                                           | output      |
//! |----------|--------------------------------------------------|-------------|
//! | enc1     | Conv+BN s2, ReLU, Conv+BN, ReLU                  | 32x32x16    |
//! | enc2     | Conv+BN s2, ReLU, Conv+BN, ReLU                  | 16x16x32    |
//! | enc3     | Conv+BN s2, ReLU                                 | 8x8x1       |
//! | code     | FC (linear)                                      | 32          |
//! | bridge   | FC, ReLU, reshape                                | 64 -> 8x8x1 |
//! | dec1..3  | (Up+Conv+BN, ReLU, Conv+BN, ReLU) x 2, Up+Conv+BN, ReLU | 64x64x16 |
//! | logits   | Conv                                             | 64x64x4     |

use crate::error::{Error, Result};
use crate::image::NUM_CLASSES;
use crate::losses::CodeEncoder;
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, ParamSet, Tape, Tensor, Var};
use crate::{seeded_rng, SeededRng};

use super::layers::{Conv, ConvBn, Dense, Forward};

pub const CODE_DIM: usize = 32;
pub const MASK_SIZE: usize = 64;
pub const ARCH_NAME: &str = "autoencoder-64x64x4-code32";

/// The 32-value anatomy code of one mask.
pub type AnatomyCode = Vec<f32>;

#[derive(Clone, Debug)]
pub struct Autoencoder<T: Scalar> {
    pub params: ParamSet<T>,
    pub seed: u64,
    enc: [ConvBn; 5],
    code: Dense,
    bridge: Dense,
    dec: [ConvBn; 5],
    logits: Conv,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut ps = ParamSet::new();
        let (same, down) = (Conv2dSpec::SAME3, Conv2dSpec::DOWN3);
        let r = &mut rng;
        let enc = [
            ConvBn::new(&mut ps, "enc1a", NUM_CLASSES, 16, down, r),
            ConvBn::new(&mut ps, "enc1b", 16, 16, same, r),
            ConvBn::new(&mut ps, "enc2a", 16, 32, down, r),
            ConvBn::new(&mut ps, "enc2b", 32, 32, same, r),
            ConvBn::new(&mut ps, "enc3", 32, 1, down, r),
        ];
        let code = Dense::new(&mut ps, "code", 64, CODE_DIM, r);
        let bridge = Dense::new(&mut ps, "bridge", CODE_DIM, 64, r);
        let dec = [
            ConvBn::new(&mut ps, "dec1a", 1, 32, same, r),
            ConvBn::new(&mut ps, "dec1b", 32, 32, same, r),
            ConvBn::new(&mut ps, "dec2a", 32, 16, same, r),
            ConvBn::new(&mut ps, "dec2b", 16, 16, same, r),
            ConvBn::new(&mut ps, "dec3", 16, 16, same, r),
        ];
        let logits = Conv::new(&mut ps, "logits", 16, NUM_CLASSES, same, r);
        Autoencoder { params: ps, seed, enc, code, bridge, dec, logits }
    }

    fn check_input(shape: &[usize]) -> Result<()> {
        match shape {
            [_, MASK_SIZE, MASK_SIZE, NUM_CLASSES] => Ok(()),
            _ => Err(Error::shape("autoencoder", format!("expected (N, 64, 64, 4) masks, got {shape:?}"))),
        }
    }

    /// Masks (N, 64, 64, 4) -> codes (N, 32).
    pub fn encode_forward<'t>(&self, x: Var<'t, T>, fwd: &mut Forward<'_, T>) -> Result<Var<'t, T>> {
        Self::check_input(&x.shape())?;
        let ps = &self.params;
        fwd.record("input", x);
        let mut h = x;
        for layer in &self.enc {
            h = layer.forward(ps, h, fwd)?;
            fwd.record("conv+bn", h);
            h = h.relu();
            fwd.record("relu", h);
        }
        let n = h.shape()[0];
        let code = self.code.forward(ps, h.reshape(&[n, 64])?)?;
        fwd.record("fc", code);
        Ok(code)
    }

    /// Codes (N, 32) -> logits (N, 64, 64, 4).
    pub fn decode_forward<'t>(&self, code: Var<'t, T>, fwd: &mut Forward<'_, T>) -> Result<Var<'t, T>> {
        let shape = code.shape();
        if shape.len() != 2 || shape[1] != CODE_DIM {
            return Err(Error::shape("decode", format!("expected (N, {CODE_DIM}) codes, got {shape:?}")));
        }
        let ps = &self.params;
        let n = shape[0];
        let h = self.bridge.forward(ps, code)?;
        fwd.record("fc", h);
        let h = h.relu();
        fwd.record("relu", h);
        let mut h = h.reshape(&[n, 8, 8, 1])?;
        for (i, layer) in self.dec.iter().enumerate() {
            if i % 2 == 0 {
                h = h.upsample_nearest2()?;
            }
            h = layer.forward(ps, h, fwd)?;
            fwd.record(if i % 2 == 0 { "up+conv+bn" } else { "conv+bn" }, h);
            h = h.relu();
            fwd.record("relu", h);
        }
        let out = self.logits.forward(ps, h)?;
        fwd.record("conv", out);
        Ok(out)
    }

    /// Full reconstruction logits.
    pub fn forward<'t>(&self, x: Var<'t, T>, fwd: &mut Forward<'_, T>) -> Result<Var<'t, T>> {
        let code = self.encode_forward(x, fwd)?;
        self.decode_forward(code, fwd)
    }

    /// Train-mode reconstruction logits; running statistics are updated.
    pub fn forward_train<'t>(&mut self, x: Var<'t, T>, rng: &mut SeededRng) -> Result<Var<'t, T>> {
        let mut fwd = Forward::train(rng);
        let out = self.forward(x, &mut fwd)?;
        fwd.commit(&mut self.params);
        Ok(out)
    }

    /// Eval-mode codes of a batch of soft masks (N, 64, 64, 4).
    pub fn encode(&self, masks: &Tensor<T>) -> Result<Vec<AnatomyCode>> {
        let tape = Tape::new();
        let code = self.encode_forward(tape.constant(masks.clone()), &mut Forward::eval())?.value();
        Ok(code.data().chunks(CODE_DIM).map(|c| c.iter().map(|v| v.to_f64c() as f32).collect()).collect())
    }

    /// Eval-mode class probabilities (N, 64, 64, 4) for a batch of codes.
    pub fn decode(&self, codes: &[AnatomyCode]) -> Result<Tensor<T>> {
        if codes.is_empty() || codes.iter().any(|c| c.len() != CODE_DIM) {
            return Err(Error::shape("decode", format!("codes must be nonempty with length {CODE_DIM}")));
        }
        let data = codes.iter().flatten().map(|&v| T::from_f64c(v as f64)).collect();
        let tape = Tape::new();
        let code = tape.constant(Tensor::new(&[codes.len(), CODE_DIM], data)?);
        Ok(self.decode_forward(code, &mut Forward::eval())?.softmax_channel().value())
    }

    /// Eval-mode reconstruction probabilities.
    pub fn reconstruct(&self, masks: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let logits = self.forward(tape.constant(masks.clone()), &mut Forward::eval())?;
        Ok(logits.softmax_channel().value())
    }

    /// Layer-by-layer output shapes (without batch axis) of one eval pass.
    pub fn shape_trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let tape = Tape::new();
        let mut fwd = Forward::eval().with_trace();
        let x = tape.constant(Tensor::zeros(&[1, MASK_SIZE, MASK_SIZE, NUM_CLASSES]));
        self.forward(x, &mut fwd)?;
        Ok(fwd.take_trace())
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }
}

impl<T: Scalar> CodeEncoder<T> for Autoencoder<T> {
    fn encode_var<'t>(&self, masks: Var<'t, T>) -> Result<Var<'t, T>> {
        self.encode_forward(masks, &mut Forward::eval())
    }

    fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }
}
