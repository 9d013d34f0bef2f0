//! Registration losses: image dissimilarity, field smoothness, and the two
//! anatomical terms defined on segmentation masks.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{nhwc_of, Backward, BackwardCtx, GradSink, Var};

pub const NCC_EPS: f64 = 1e-8;
pub const CE_CLAMP: f64 = 1e-7;
pub const CHARBONNIER_DELTA: f64 = 1e-3;

/// Weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_ce: f64,
    pub lambda_ae: f64,
}

impl LossWeights {
    /// Operating point found by grid search on the validation fold.
    pub const PAPER: LossWeights = LossWeights { lambda_r: 5e-5, lambda_ce: 1.0, lambda_ae: 0.1 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_r", self.lambda_r), ("lambda_ce", self.lambda_ce), ("lambda_ae", self.lambda_ae)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg("loss weights", format!("{name} = {v} must be a nonnegative real")));
            }
        }
        Ok(())
    }
}

/// Smoothing applied to the absolute differences of the total-variation term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum TvPenalty {
    /// Plain |x| with subgradient 0 at 0.
    #[default]
    L1,
    /// sqrt(x^2 + delta^2) - delta.
    Charbonnier(f64),
}

struct NccRule<T> {
    per_item: Vec<NccParts<T>>,
    size: usize,
}

struct NccParts<T> {
    mean_a: T,
    mean_b: T,
    num: T,
    saa: T,
    sbb: T,
    denom: T,
}

impl<T: Scalar> Backward<T> for NccRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        let (a, b) = (ctx.input(0), ctx.input(1));
        let scale = g[0] / T::from_usize_c(self.per_item.len());
        for (idx, p) in self.per_item.iter().enumerate() {
            let range = idx * self.size..(idx + 1) * self.size;
            let d3 = p.denom * p.denom * p.denom;
            // d(-num/denom)/dA_i = -(B'_i / denom - num * sbb * A'_i / denom^3), and symmetrically for B.
            if let Some(da) = sink.slot(0) {
                for i in range.clone() {
                    let (ac, bc) = (a[i] - p.mean_a, b[i] - p.mean_b);
                    da[i] -= scale * (bc / p.denom - p.num * p.sbb * ac / d3);
                }
            }
            if let Some(db) = sink.slot(1) {
                for i in range {
                    let (ac, bc) = (a[i] - p.mean_a, b[i] - p.mean_b);
                    db[i] -= scale * (ac / p.denom - p.num * p.saa * bc / d3);
                }
            }
        }
    }
}

struct TvRule {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    penalty: TvPenalty,
}

impl TvRule {
    fn dpen<T: Scalar>(&self, d: T) -> T {
        match self.penalty {
            TvPenalty::L1 => {
                if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            TvPenalty::Charbonnier(delta) => {
                let delta = T::from_f64c(delta);
                d / (d * d + delta * delta).sqrt()
            }
        }
    }
}

fn pen<T: Scalar>(penalty: TvPenalty, d: T) -> T {
    match penalty {
        TvPenalty::L1 => d.abs(),
        TvPenalty::Charbonnier(delta) => {
            let delta = T::from_f64c(delta);
            (d * d + delta * delta).sqrt() - delta
        }
    }
}

impl<T: Scalar> Backward<T> for TvRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        let f = ctx.input(0);
        let Some(df) = sink.slot(0) else { return };
        let (h, w, c) = (self.h, self.w, self.c);
        let scale = g[0] / T::from_usize_c(self.n * h * w);
        for b in 0..self.n {
            for y in 0..h {
                for x in 0..w {
                    let i = ((b * h + y) * w + x) * c;
                    for k in 0..c {
                        if x + 1 < w {
                            let s = self.dpen(f[i + c + k] - f[i + k]) * scale;
                            df[i + c + k] += s;
                            df[i + k] -= s;
                        }
                        if y + 1 < h {
                            let j = i + w * c;
                            let s = self.dpen(f[j + k] - f[i + k]) * scale;
                            df[j + k] += s;
                            df[i + k] -= s;
                        }
                    }
                }
            }
        }
    }
}

struct CeRule {
    clamp: f64,
    pixels: usize,
}

impl<T: Scalar> Backward<T> for CeRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        let (p, t) = (ctx.input(0), ctx.input(1));
        let lo = T::from_f64c(self.clamp);
        let scale = g[0] / T::from_usize_c(self.pixels);
        if let Some(dp) = sink.slot(0) {
            for i in 0..dp.len() {
                if t[i] != T::zero() && p[i] >= lo && p[i] <= T::one() {
                    dp[i] -= scale * t[i] / p[i];
                }
            }
        }
    }
}

struct CeLogitsRule<T> {
    probs: Vec<T>,
    pixels: usize,
}

impl<T: Scalar> Backward<T> for CeLogitsRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        let t = ctx.input(1);
        let scale = g[0] / T::from_usize_c(self.pixels);
        if let Some(dz) = sink.slot(0) {
            for i in 0..dz.len() {
                dz[i] += scale * (self.probs[i] - t[i]);
            }
        }
    }
}

fn same_shape<T: Scalar>(a: Var<'_, T>, b: Var<'_, T>, op: &'static str) -> Result<Vec<usize>> {
    a.tape().check_owned(&[b])?;
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

/// Negative global normalized cross-correlation, averaged over the batch. Range [-1, 1].
pub fn ncc_loss<'t, T: Scalar>(warped: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = same_shape(warped, target, "ncc_loss")?;
    let (n, h, w, c) = nhwc_of(&shape, "ncc_loss")?;
    if c != 1 {
        return Err(Error::shape("ncc_loss", format!("single-channel images required, got {c} channels")));
    }
    let (a, b) = (warped.value(), target.value());
    let size = h * w;
    let eps = T::from_f64c(NCC_EPS);
    let mut total = T::zero();
    let mut per_item = Vec::with_capacity(n);
    for (ia, ib) in a.data().chunks(size).zip(b.data().chunks(size)) {
        let inv = T::one() / T::from_usize_c(size);
        let mean_a = ia.iter().copied().sum::<T>() * inv;
        let mean_b = ib.iter().copied().sum::<T>() * inv;
        let (mut num, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
        for (&x, &y) in ia.iter().zip(ib) {
            let (ac, bc) = (x - mean_a, y - mean_b);
            num += ac * bc;
            saa += ac * ac;
            sbb += bc * bc;
        }
        let denom = (saa * sbb + eps).sqrt();
        total -= num / denom;
        per_item.push(NccParts { mean_a, mean_b, num, saa, sbb, denom });
    }
    let value = total / T::from_usize_c(n);
    Ok(warped.tape().push(vec![1], vec![value], &[warped, target], NccRule { per_item, size }))
}

/// Anisotropic total variation of an (N, H, W, 2) field, normalized by N * H * W.
pub fn tv_reg<'t, T: Scalar>(field: Var<'t, T>, penalty: TvPenalty) -> Result<Var<'t, T>> {
    let shape = field.shape();
    let (n, h, w, c) = nhwc_of(&shape, "tv_reg")?;
    if c != 2 {
        return Err(Error::shape("tv_reg", format!("field needs 2 channels, got {c}")));
    }
    let f = field.value();
    let f = f.data();
    let mut total = T::zero();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let i = ((b * h + y) * w + x) * c;
                for k in 0..c {
                    if x + 1 < w {
                        total += pen(penalty, f[i + c + k] - f[i + k]);
                    }
                    if y + 1 < h {
                        total += pen(penalty, f[i + w * c + k] - f[i + k]);
                    }
                }
            }
        }
    }
    let value = total / T::from_usize_c(n * h * w);
    Ok(field.tape().push(vec![1], vec![value], &[field], TvRule { n, h, w, c, penalty }))
}

/// Pixel-level categorical cross-entropy of a soft prediction against a one-hot target,
/// averaged over pixels and batch items. Probabilities are clamped to [1e-7, 1].
pub fn ce_loss<'t, T: Scalar>(warped: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = same_shape(warped, target, "ce_loss")?;
    let (n, h, w, _) = nhwc_of(&shape, "ce_loss")?;
    let (p, t) = (warped.value(), target.value());
    let lo = T::from_f64c(CE_CLAMP);
    let mut total = T::zero();
    for (&pv, &tv) in p.data().iter().zip(t.data()) {
        if tv != T::zero() {
            total -= tv * pv.max(lo).min(T::one()).ln();
        }
    }
    let pixels = n * h * w;
    let value = total / T::from_usize_c(pixels);
    Ok(warped.tape().push(vec![1], vec![value], &[warped, target], CeRule { clamp: CE_CLAMP, pixels }))
}

/// Cross-entropy computed directly from logits (softmax over channels), averaged over pixels.
pub fn ce_with_logits<'t, T: Scalar>(logits: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = same_shape(logits, target, "ce_with_logits")?;
    let c = *shape.last().expect("rank >= 1");
    let pixels = shape.iter().product::<usize>() / c;
    let mut probs = logits.value().into_data();
    let t = target.value();
    let mut total = T::zero();
    for (zp, tp) in probs.chunks_mut(c).zip(t.data().chunks(c)) {
        let m = zp.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let lse = zp.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
        for k in 0..c {
            total -= tp[k] * (zp[k] - lse);
            zp[k] = (zp[k] - lse).exp();
        }
    }
    let value = total / T::from_usize_c(pixels);
    Ok(logits.tape().push(vec![1], vec![value], &[logits, target], CeLogitsRule { probs, pixels }))
}

/// Something that maps (N, H, W, C) soft masks to (N, code) anatomy codes on a tape.
pub trait CodeEncoder<T: Scalar> {
    /// Eval-mode encoding.
    fn encode_var<'t>(&self, masks: Var<'t, T>) -> Result<Var<'t, T>>;

    /// True when no encoder parameter can receive a gradient.
    fn is_frozen(&self) -> bool;
}

/// Squared Euclidean distance between the codes of the warped and target masks,
/// averaged over the batch. The encoder must be frozen.
pub fn ae_loss<'t, T: Scalar, E: CodeEncoder<T> + ?Sized>(
    warped: Var<'t, T>,
    target: Var<'t, T>,
    encoder: &E,
) -> Result<Var<'t, T>> {
    if !encoder.is_frozen() {
        return Err(Error::EncoderNotFrozen);
    }
    let shape = same_shape(warped, target, "ae_loss")?;
    let n = shape[0];
    let cw = encoder.encode_var(warped)?;
    let ct = encoder.encode_var(target)?;
    let d = cw.sub(ct)?;
    Ok(d.mul(d)?.sum().scale(T::one() / T::from_usize_c(n)))
}

/// Per-term values of one evaluation of the composite objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub ncc: f64,
    pub tv: f64,
    pub ce: f64,
    pub ae: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.ncc, self.tv, self.ce, self.ae, self.total].iter().all(|v| v.is_finite())
    }
}

/// Inputs of the composite objective: warped source image and mask, target image
/// and mask, and the field that produced the warp.
pub struct CompositeInputs<'t, T: Scalar> {
    pub warped_image: Var<'t, T>,
    pub target_image: Var<'t, T>,
    pub warped_mask: Option<Var<'t, T>>,
    pub target_mask: Option<Var<'t, T>>,
    pub field: Var<'t, T>,
}

/// ncc + lambda_r * tv + lambda_ce * ce + lambda_ae * ae. Terms with zero weight are
/// skipped and reported as 0.
pub fn composite_loss<'t, T: Scalar>(
    inputs: &CompositeInputs<'t, T>,
    weights: LossWeights,
    penalty: TvPenalty,
    encoder: Option<&dyn CodeEncoder<T>>,
) -> Result<(Var<'t, T>, LossTerms)> {
    weights.validate()?;
    let ncc = ncc_loss(inputs.warped_image, inputs.target_image)?;
    let tv = tv_reg(inputs.field, penalty)?;
    let mut terms = LossTerms { ncc: ncc.item().to_f64c(), tv: tv.item().to_f64c(), ..Default::default() };
    let mut total = ncc.add(tv.scale(T::from_f64c(weights.lambda_r)))?;
    let masks = || -> Result<(Var<'t, T>, Var<'t, T>)> {
        match (inputs.warped_mask, inputs.target_mask) {
            (Some(w), Some(t)) => Ok((w, t)),
            _ => Err(Error::arg("composite_loss", "mask terms need warped and target masks")),
        }
    };
    if weights.lambda_ce > 0.0 {
        let (w, t) = masks()?;
        let ce = ce_loss(w, t)?;
        terms.ce = ce.item().to_f64c();
        total = total.add(ce.scale(T::from_f64c(weights.lambda_ce)))?;
    }
    if weights.lambda_ae > 0.0 {
        let (w, t) = masks()?;
        let enc = encoder.ok_or(Error::MissingAutoencoder("lambda_ae > 0"))?;
        let ae = ae_loss(w, t, enc)?;
        terms.ae = ae.item().to_f64c();
        total = total.add(ae.scale(T::from_f64c(weights.lambda_ae)))?;
    }
    terms.total = total.item().to_f64c();
    Ok((total, terms))
}
