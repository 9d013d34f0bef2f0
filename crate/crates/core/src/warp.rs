//! Differentiable backward warping by a dense displacement field.
//!
//! The output at pixel `p` is the bilinear sample of the source at `p + field(p)`,
//! with channel 0 of the field displacing along the width (x) and channel 1 along
//! the height (y), in pixels. Sample coordinates outside the grid are clamped to
//! the border.

use crate::error::{Error, Result};
use crate::image::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::{nhwc_of, Backward, BackwardCtx, GradSink, Tape, Tensor, Var};

/// Guard for per-pixel renormalization of warped soft masks.
pub const RENORM_EPS: f64 = 1e-7;

/// Per-pixel displacement map of shape (N, H, W, 2).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<T>(Tensor<T>);

impl<T: Scalar> DeformationField<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let (_, _, _, c) = t.nhwc()?;
        if c != 2 {
            return Err(Error::shape("deformation field", format!("expected 2 channels, got {:?}", t.shape())));
        }
        Ok(DeformationField(t))
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        DeformationField(Tensor::zeros(&[n, h, w, 2]))
    }

    /// Same displacement `(dx, dy)` everywhere.
    pub fn constant(n: usize, h: usize, w: usize, dx: T, dy: T) -> Self {
        DeformationField(Tensor::from_fn(&[n, h, w, 2], |i| if i % 2 == 0 { dx } else { dy }))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    /// Displacement (dx, dy) of batch item `n` at (row, col).
    pub fn at(&self, n: usize, row: usize, col: usize) -> (T, T) {
        let (_, h, w) = self.dims();
        let i = ((n * h + row) * w + col) * 2;
        (self.0.data()[i], self.0.data()[i + 1])
    }

    pub fn mean_magnitude(&self) -> f64 {
        let d = self.0.data();
        let n = d.len() / 2;
        d.chunks(2).map(|p| p[0].to_f64c().hypot(p[1].to_f64c())).sum::<f64>() / n as f64
    }
}

#[derive(Clone, Copy)]
struct Sample<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    inside_x: bool,
    inside_y: bool,
}

#[inline]
fn sample<T: Scalar>(pos: T, extent: usize) -> (usize, usize, T, bool) {
    let max = T::from_usize_c(extent - 1);
    let inside = pos >= T::zero() && pos <= max;
    let p = pos.max(T::zero()).min(max);
    let f = p.floor();
    let i0 = f.to_usize().unwrap_or(0);
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, p - f, inside)
}

fn samples<T: Scalar>(field: &[T], n: usize, h: usize, w: usize) -> Vec<Sample<T>> {
    let mut out = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let i = ((b * h + y) * w + x) * 2;
                let (x0, x1, ax, inside_x) = sample(T::from_usize_c(x) + field[i], w);
                let (y0, y1, ay, inside_y) = sample(T::from_usize_c(y) + field[i + 1], h);
                out.push(Sample { x0, x1, y0, y1, ax, ay, inside_x, inside_y });
            }
        }
    }
    out
}

struct WarpRule<T> {
    h: usize,
    w: usize,
    c: usize,
    samples: Vec<Sample<T>>,
}

impl<T: Scalar> Backward<T> for WarpRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) {
        let (h, w, c) = (self.h, self.w, self.c);
        let one = T::one();
        if let Some(dsrc) = sink.slot(0) {
            for (p, s) in self.samples.iter().enumerate() {
                let b = p / (h * w);
                let g = &dy[p * c..][..c];
                let base = b * h * w;
                let corners = [
                    (s.y0, s.x0, (one - s.ax) * (one - s.ay)),
                    (s.y0, s.x1, s.ax * (one - s.ay)),
                    (s.y1, s.x0, (one - s.ax) * s.ay),
                    (s.y1, s.x1, s.ax * s.ay),
                ];
                for (yy, xx, wt) in corners {
                    let d = &mut dsrc[(base + yy * w + xx) * c..][..c];
                    d.iter_mut().zip(g).for_each(|(a, &v)| *a += v * wt);
                }
            }
        }
        if sink.wants(1) {
            let src = ctx.input(0);
            let dfield = sink.slot(1).expect("wanted");
            for (p, s) in self.samples.iter().enumerate() {
                let b = p / (h * w);
                let base = b * h * w;
                let g = &dy[p * c..][..c];
                let v00 = &src[(base + s.y0 * w + s.x0) * c..][..c];
                let v01 = &src[(base + s.y0 * w + s.x1) * c..][..c];
                let v10 = &src[(base + s.y1 * w + s.x0) * c..][..c];
                let v11 = &src[(base + s.y1 * w + s.x1) * c..][..c];
                let (mut gx, mut gy) = (T::zero(), T::zero());
                for k in 0..c {
                    let dx = (one - s.ay) * (v01[k] - v00[k]) + s.ay * (v11[k] - v10[k]);
                    let dyv = (one - s.ax) * (v10[k] - v00[k]) + s.ax * (v11[k] - v01[k]);
                    gx += g[k] * dx;
                    gy += g[k] * dyv;
                }
                if s.inside_x {
                    dfield[p * 2] += gx;
                }
                if s.inside_y {
                    dfield[p * 2 + 1] += gy;
                }
            }
        }
    }
}

struct RenormRule {
    c: usize,
    eps: f64,
}

impl<T: Scalar> Backward<T> for RenormRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) {
        let x = ctx.input(0);
        let c = self.c;
        let eps = T::from_f64c(self.eps);
        let Some(dx) = sink.slot(0) else { return };
        for ((dp, gp), xp) in dx.chunks_mut(c).zip(dy.chunks(c)).zip(x.chunks(c)) {
            let s: T = xp.iter().copied().sum();
            if s > eps {
                let dot: T = gp.iter().zip(xp).map(|(&g, &v)| g * v).sum();
                for k in 0..c {
                    dp[k] += gp[k] / s - dot / (s * s);
                }
            } else {
                for k in 0..c {
                    dp[k] += gp[k] / eps;
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Warp this (N, H, W, C) tensor by an (N, H, W, 2) displacement field.
    pub fn warp(self, field: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape().check_owned(&[field])?;
        let (src_shape, field_shape) = (self.shape(), field.shape());
        let (n, h, w, c) = nhwc_of(&src_shape, "warp")?;
        let (fnb, fh, fw, fc) = nhwc_of(&field_shape, "warp")?;
        if (fnb, fh, fw, fc) != (n, h, w, 2) {
            return Err(Error::shape("warp", format!("source {src_shape:?} vs field {field_shape:?}")));
        }
        let (src, fld) = (self.value(), field.value());
        let samples = samples(fld.data(), n, h, w);
        let out = warp_values(src.data(), &samples, h, w, c);
        let rule = WarpRule { h, w, c, samples };
        Ok(self.tape().push(src_shape, out, &[self, field], rule))
    }

    /// Divide each pixel's channels by their sum (guarded below by `eps`).
    pub fn renormalize_channels(self, eps: f64) -> Var<'t, T> {
        let shape = self.shape();
        let c = *shape.last().expect("rank >= 1");
        let mut v = self.value().into_data();
        let e = T::from_f64c(eps);
        for p in v.chunks_mut(c) {
            let s = p.iter().copied().sum::<T>().max(e);
            p.iter_mut().for_each(|x| *x /= s);
        }
        self.tape().push(shape, v, &[self], RenormRule { c, eps })
    }

    /// Warp a (soft) one-hot mask channel-wise and renormalize to a probability per pixel.
    pub fn warp_onehot(self, field: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.warp(field)?.renormalize_channels(RENORM_EPS))
    }
}

fn warp_values<T: Scalar>(src: &[T], samples: &[Sample<T>], h: usize, w: usize, c: usize) -> Vec<T> {
    let one = T::one();
    let mut out = vec![T::zero(); samples.len() * c];
    for (p, s) in samples.iter().enumerate() {
        let base = (p / (h * w)) * h * w;
        let v00 = &src[(base + s.y0 * w + s.x0) * c..][..c];
        let v01 = &src[(base + s.y0 * w + s.x1) * c..][..c];
        let v10 = &src[(base + s.y1 * w + s.x0) * c..][..c];
        let v11 = &src[(base + s.y1 * w + s.x1) * c..][..c];
        let (w00, w01) = ((one - s.ax) * (one - s.ay), s.ax * (one - s.ay));
        let (w10, w11) = ((one - s.ax) * s.ay, s.ax * s.ay);
        let o = &mut out[p * c..][..c];
        for k in 0..c {
            o[k] = w00 * v00[k] + w01 * v01[k] + w10 * v10[k] + w11 * v11[k];
        }
    }
    out
}

/// Warp a tensor outside of any tape.
pub fn warp_tensor<T: Scalar>(source: &Tensor<T>, field: &DeformationField<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let (s, f) = (tape.constant(source.clone()), tape.constant(field.tensor().clone()));
    Ok(s.warp(f)?.value())
}

/// Soft one-hot warp outside of any tape.
pub fn warp_onehot_tensor<T: Scalar>(mask: &Tensor<T>, field: &DeformationField<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let (s, f) = (tape.constant(mask.clone()), tape.constant(field.tensor().clone()));
    Ok(s.warp_onehot(f)?.value())
}

/// Per-pixel argmax over channels of batch item `index`; ties go to the lowest class index.
pub fn hard_labels<T: Scalar>(soft: &Tensor<T>, index: usize) -> Result<LabelMask> {
    let (n, h, w, c) = soft.nhwc()?;
    if index >= n {
        return Err(Error::arg("hard_labels", format!("batch index {index} of {n}")));
    }
    let data = &soft.data()[index * h * w * c..(index + 1) * h * w * c];
    let labels = data
        .chunks(c)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if p[k] > p[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, labels)
}

/// Nearest-neighbour label warp of batch item 0 of `field` (keeps masks hard).
pub fn warp_labels_nearest<T: Scalar>(mask: &LabelMask, field: &DeformationField<T>) -> Result<LabelMask> {
    let (_, h, w) = field.dims();
    if (h, w) != (mask.height, mask.width) {
        return Err(Error::shape("warp_labels_nearest", format!("mask {}x{} vs field {h}x{w}", mask.height, mask.width)));
    }
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = field.at(0, y, x);
            let sx = (x as f64 + dx.to_f64c()).round().clamp(0.0, (w - 1) as f64) as usize;
            let sy = (y as f64 + dy.to_f64c()).round().clamp(0.0, (h - 1) as f64) as usize;
            out.set(y, x, mask.at(sy, sx));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, h, w, 1], |i| ((i * 7919) % 101) as f64 / 100.0)
    }

    #[test]
    fn zero_field_is_exact_identity() {
        let src = ramp(9, 7);
        let out = warp_tensor(&src, &DeformationField::zeros(1, 9, 7)).unwrap();
        assert_eq!(out, src);
        let s32: Tensor<f32> = src.cast();
        assert_eq!(warp_tensor(&s32, &DeformationField::zeros(1, 9, 7)).unwrap(), s32);
    }

    #[test]
    fn unit_shift_pulls_from_right_neighbour() {
        let (h, w) = (5, 6);
        let src = ramp(h, w);
        let out = warp_tensor(&src, &DeformationField::constant(1, h, w, 1.0, 0.0)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let want = src.data()[y * w + (x + 1).min(w - 1)];
                assert_eq!(out.data()[y * w + x], want);
            }
        }
    }

    #[test]
    fn half_shift_on_step_edge() {
        // columns 0..3 are 0, columns 3..6 are 1
        let src = Tensor::from_fn(&[1, 2, 6, 1], |i| if i % 6 >= 3 { 1.0 } else { 0.0 });
        let out = warp_tensor(&src, &DeformationField::constant(1, 2, 6, 0.5, 0.0)).unwrap();
        assert_eq!(&out.data()[..6], &[0.0, 0.0, 0.5, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn extent_mismatch_rejected() {
        let tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::zeros(&[1, 4, 4, 1]));
        let f = tape.constant(Tensor::zeros(&[1, 4, 5, 2]));
        assert!(s.warp(f).is_err());
    }

    #[test]
    fn onehot_warp_sums_to_one_and_integer_shift_stays_hard() {
        let mut m = LabelMask::filled(8, 8, 0);
        for y in 2..6 {
            for x in 3..7 {
                m.set(y, x, 1);
            }
        }
        let oh: Tensor<f64> = m.to_onehot(2).unwrap();
        let soft = warp_onehot_tensor(&oh, &DeformationField::constant(1, 8, 8, 0.3, -0.7)).unwrap();
        for p in soft.data().chunks(2) {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        }
        let shifted = warp_onehot_tensor(&oh, &DeformationField::constant(1, 8, 8, -1.0, 2.0)).unwrap();
        assert!(shifted.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let lab = hard_labels(&shifted, 0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let (sy, sx) = ((y + 2).min(7), x.max(1) - 1);
                assert_eq!(lab.at(y, x), m.at(sy, sx));
            }
        }
        assert_eq!(warp_onehot_tensor(&oh, &DeformationField::zeros(1, 8, 8)).unwrap(), oh);
    }

    #[test]
    fn hard_label_ties_go_low() {
        let uniform = Tensor::<f32>::full(&[1, 3, 3, 4], 0.25);
        assert!(hard_labels(&uniform, 0).unwrap().labels.iter().all(|&l| l == 0));
        // half-pixel shift of a vertical 0|1 boundary: the straddling column is 0.5/0.5
        let mut m = LabelMask::filled(4, 6, 0);
        for y in 0..4 {
            for x in 3..6 {
                m.set(y, x, 1);
            }
        }
        let oh: Tensor<f64> = m.to_onehot(2).unwrap();
        let soft = warp_onehot_tensor(&oh, &DeformationField::constant(1, 4, 6, 0.5, 0.0)).unwrap();
        let lab = hard_labels(&soft, 0).unwrap();
        for y in 0..4 {
            assert_eq!(&lab.labels[y * 6..y * 6 + 6], &[0, 0, 0, 1, 1, 1]);
        }
    }
}
