//! U-shaped deformation-field predictor.
//!
//! Input is the source and target images concatenated as a 64x64x2 tensor
//! (source first); output is a 64x64x2 displacement field in pixels.
//! Skip tensors (a), (b), (c) are the Conv+BN outputs of each encoder stage,
//! taken before the activation so that the ELU following each concatenation
//! acts on both halves alike.
//! After each "Up + Conv + BN" the skip is concatenated, doubling the channel
//! count, and the following convolution reduces it back.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, ParamSet, Tape, Tensor, Var};
use crate::warp::DeformationField;
use crate::{seeded_rng, SeededRng};

use super::layers::{ConvBn, Forward};

pub const DROPOUT_RATE: f64 = 0.5;
pub const IMAGE_SIZE: usize = 64;
pub const ARCH_NAME: &str = "vectorcnn-64x64x2";

#[derive(Clone, Debug)]
pub struct VectorCnn<T: Scalar> {
    pub params: ParamSet<T>,
    pub seed: u64,
    down: [[ConvBn; 2]; 4],
    up: [[ConvBn; 3]; 3],
    out: ConvBn,
}

impl<T: Scalar> VectorCnn<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let r = &mut rng;
        let mut ps = ParamSet::new();
        let s = Conv2dSpec::SAME3;
        let widths = [16, 32, 64, 128];
        let mut cin = 2;
        let down = widths.map(|c| {
            let name = format!("down{c}");
            let pair = [ConvBn::new(&mut ps, &format!("{name}a"), cin, c, s, r), ConvBn::new(&mut ps, &format!("{name}b"), c, c, s, r)];
            cin = c;
            pair
        });
        let up = [64, 32, 16].map(|c| {
            let name = format!("up{c}");
            [
                ConvBn::new(&mut ps, &format!("{name}a"), 2 * c, c, s, r),
                ConvBn::new(&mut ps, &format!("{name}b"), 2 * c, c, s, r),
                ConvBn::new(&mut ps, &format!("{name}c"), c, c, s, r),
            ]
        });
        let out = ConvBn::new(&mut ps, "field", 16, 2, s, r);
        VectorCnn { params: ps, seed, down, up, out }
    }

    /// (N, 64, 64, 2) image pairs -> (N, 64, 64, 2) fields.
    pub fn forward<'t>(&self, x: Var<'t, T>, fwd: &mut Forward<'_, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if !matches!(shape[..], [_, IMAGE_SIZE, IMAGE_SIZE, 2]) {
            return Err(Error::shape("vectorcnn", format!("expected (N, 64, 64, 2) input, got {shape:?}")));
        }
        let ps = &self.params;
        fwd.record("input", x);
        let mut h = x;
        let mut skips = Vec::with_capacity(3);
        for (level, [a, b]) in self.down.iter().enumerate() {
            h = a.forward(ps, h, fwd)?;
            fwd.record("conv+bn", h);
            h = h.elu();
            fwd.record("elu", h);
            h = b.forward(ps, h, fwd)?;
            fwd.record("conv+bn", h);
            if level < 3 {
                skips.push(h);
            }
            h = h.elu();
            fwd.record("elu", h);
            if level < 3 {
                h = h.avgpool2d((2, 2), (2, 2))?;
                fwd.record("avgpool", h);
            } else {
                h = fwd.dropout(h, DROPOUT_RATE)?;
                fwd.record("dropout", h);
            }
        }
        for (level, [a, b, c]) in self.up.iter().enumerate() {
            h = a.forward(ps, h.upsample_nearest2()?, fwd)?;
            fwd.record("up+conv+bn", h);
            h = h.concat_channels(skips.pop().expect("one skip per level"))?;
            fwd.record("concat", h);
            h = h.elu();
            fwd.record("elu", h);
            h = b.forward(ps, h, fwd)?;
            fwd.record("conv+bn", h);
            h = h.elu();
            fwd.record("elu", h);
            h = c.forward(ps, h, fwd)?;
            fwd.record("conv+bn", h);
            h = h.elu();
            fwd.record("elu", h);
            if level < 2 {
                h = fwd.dropout(h, DROPOUT_RATE)?;
                fwd.record("dropout", h);
            }
        }
        let field = self.out.forward(ps, h, fwd)?;
        fwd.record("conv+bn", field);
        Ok(field)
    }

    /// Train-mode fields; running statistics are updated.
    pub fn forward_train<'t>(&mut self, x: Var<'t, T>, rng: &mut SeededRng) -> Result<Var<'t, T>> {
        let mut fwd = Forward::train(rng);
        let out = self.forward(x, &mut fwd)?;
        fwd.commit(&mut self.params);
        Ok(out)
    }

    /// Eval-mode fields for a batch of (source, target) pairs stacked as (N, 64, 64, 2).
    pub fn predict_batch(&self, pairs: &Tensor<T>) -> Result<DeformationField<T>> {
        let tape = Tape::new();
        let field = self.forward(tape.constant(pairs.clone()), &mut Forward::eval())?;
        DeformationField::new(field.value())
    }

    /// Field registering `source` onto `target` (eval mode).
    pub fn predict_field(&self, source: &Image, target: &Image) -> Result<DeformationField<T>> {
        self.predict_batch(&pair_tensor(&[(source, target)])?)
    }

    pub fn shape_trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let tape = Tape::new();
        let mut fwd = Forward::eval().with_trace();
        self.forward(tape.constant(Tensor::zeros(&[1, IMAGE_SIZE, IMAGE_SIZE, 2])), &mut fwd)?;
        Ok(fwd.take_trace())
    }
}

/// Stack (source, target) image pairs into an (N, H, W, 2) network input.
pub fn pair_tensor<T: Scalar>(pairs: &[(&Image, &Image)]) -> Result<Tensor<T>> {
    let (h, w) = match pairs.first() {
        Some((s, _)) => (s.height, s.width),
        None => return Err(Error::Empty("image pairs".into())),
    };
    let mut data = Vec::with_capacity(pairs.len() * h * w * 2);
    for (s, t) in pairs {
        if (s.height, s.width) != (h, w) || (t.height, t.width) != (h, w) {
            return Err(Error::shape("pair_tensor", "all images must share one size"));
        }
        for (a, b) in s.data.iter().zip(&t.data) {
            data.push(T::from_f64c(*a as f64));
            data.push(T::from_f64c(*b as f64));
        }
    }
    Tensor::new(&[pairs.len(), h, w, 2], data)
}
