//! Convolution, pooling, resampling, normalization, dropout and dense layers.

use rand::Rng;

use super::nhwc_of as nhwc;
use super::tape::{Backward, BackwardCtx, GradSink, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Train or eval behaviour for batch normalization and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dSpec {
    pub const SAME3: Conv2dSpec = Conv2dSpec { stride: (1, 1), padding: (1, 1) };
    pub const DOWN3: Conv2dSpec = Conv2dSpec { stride: (2, 2), padding: (1, 1) };
}

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn im2col<T: Scalar>(&self, img: &[T], col: &mut [T]) {
        let k = self.patch();
        let run = self.kw * self.cin;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut col[(oy * self.wo + ox) * k..][..k];
                for ky in 0..self.kh {
                    let dst = &mut row[ky * run..][..run];
                    let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                    if iy < 0 || iy >= self.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let x0 = ox as isize * self.sw as isize - self.pw as isize;
                    if x0 >= 0 && x0 as usize + self.kw <= self.w {
                        let src = (iy as usize * self.w + x0 as usize) * self.cin;
                        dst.copy_from_slice(&img[src..src + run]);
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = x0 + kx as isize;
                        let d = &mut dst[kx * self.cin..][..self.cin];
                        if ix < 0 || ix >= self.w as isize {
                            d.fill(T::zero());
                        } else {
                            let src = (iy as usize * self.w + ix as usize) * self.cin;
                            d.copy_from_slice(&img[src..src + self.cin]);
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], img: &mut [T]) {
        let k = self.patch();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &col[(oy * self.wo + ox) * k..][..k];
                for ky in 0..self.kh {
                    let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = &row[(ky * self.kw + kx) * self.cin..][..self.cin];
                        let dst = &mut img[(iy as usize * self.w + ix as usize) * self.cin..][..self.cin];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
            }
        }
    }
}

struct ConvRule {
    g: ConvGeom,
    n: usize,
}

impl<T: Scalar> Backward<T> for ConvRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) {
        let g = self.g;
        let (x, kern) = (ctx.input(0), ctx.input(1));
        let k = g.patch();
        let rows = g.ho * g.wo;
        let in_sz = g.h * g.w * g.cin;
        let out_sz = rows * g.cout;
        if let Some(db) = sink.slot(2) {
            for p in dy.chunks(g.cout) {
                db.iter_mut().zip(p).for_each(|(a, &b)| *a += b);
            }
        }
        let want_x = sink.wants(0);
        let want_k = sink.wants(1);
        if !want_x && !want_k {
            return;
        }
        let mut col = vec![T::zero(); rows * k];
        let mut dk = if want_k { vec![T::zero(); k * g.cout] } else { Vec::new() };
        for n in 0..self.n {
            let dyn_ = &dy[n * out_sz..][..out_sz];
            if want_k {
                g.im2col(&x[n * in_sz..][..in_sz], &mut col);
                T::gemm(k, rows, g.cout, T::one(), &col, 1, k as isize, dyn_, g.cout as isize, 1, T::one(), &mut dk, g.cout as isize, 1);
            }
            if want_x {
                T::gemm(rows, g.cout, k, T::one(), dyn_, g.cout as isize, 1, kern, 1, g.cout as isize, T::zero(), &mut col, k as isize, 1);
                let dx = sink.slot(0).expect("wanted");
                g.col2im(&col, &mut dx[n * in_sz..][..in_sz]);
            }
        }
        if want_k {
            sink.add(1, &dk);
        }
    }
}

struct PoolRule {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ho: usize,
    wo: usize,
}

impl<T: Scalar> Backward<T> for PoolRule {
    fn backward(&self, _: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) {
        let Some(dx) = sink.slot(0) else { return };
        let inv = T::one() / T::from_usize_c(self.kh * self.kw);
        let c = self.c;
        for n in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let go = &dy[((n * self.ho + oy) * self.wo + ox) * c..][..c];
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let (iy, ix) = (oy * self.sh + ky, ox * self.sw + kx);
                            let d = &mut dx[((n * self.h + iy) * self.w + ix) * c..][..c];
                            d.iter_mut().zip(go).for_each(|(a, &b)| *a += b * inv);
                        }
                    }
                }
            }
        }
    }
}

struct UpsampleRule {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl<T: Scalar> Backward<T> for UpsampleRule {
    fn backward(&self, _: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) {
        let Some(dx) = sink.slot(0) else { return };
        let (h2, w2, c) = (self.h * 2, self.w * 2, self.c);
        for n in 0..self.n {
            for y in 0..h2 {
                for x in 0..w2 {
                    let go = &dy[((n * h2 + y) * w2 + x) * c..][..c];
                    let d = &mut dx[((n * self.h + y / 2) * self.w + x / 2) * c..][..c];
                    d.iter_mut().zip(go).for_each(|(a, &b)| *a += b);
                }
            }
        }
    }
}

struct BatchNormRule<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    c: usize,
    train: bool,
}

impl<T: Scalar> Backward<T> for BatchNormRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) {
        let c = self.c;
        let gamma = ctx.input(1);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (gp, xp) in dy.chunks(c).zip(self.xhat.chunks(c)) {
            for k in 0..c {
                sum_dy[k] += gp[k];
                sum_dy_xhat[k] += gp[k] * xp[k];
            }
        }
        sink.add(1, &sum_dy_xhat);
        sink.add(2, &sum_dy);
        let Some(dx) = sink.slot(0) else { return };
        let m = T::from_usize_c(dy.len() / c);
        for ((dp, gp), xp) in dx.chunks_mut(c).zip(dy.chunks(c)).zip(self.xhat.chunks(c)) {
            for k in 0..c {
                let scale = gamma[k] * self.inv_std[k];
                dp[k] += if self.train {
                    scale / m * (m * gp[k] - sum_dy[k] - xp[k] * sum_dy_xhat[k])
                } else {
                    scale * gp[k]
                };
            }
        }
    }
}

/// Per-channel statistics of one training-mode batch normalization call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// Where batch normalization takes its statistics from.
pub enum BnStats<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

struct DropoutRule<T> {
    mask: Vec<T>,
}

impl<T: Scalar> Backward<T> for DropoutRule<T> {
    fn backward(&self, _: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(dx) = sink.slot(0) {
            for i in 0..dx.len() {
                dx[i] += dy[i] * self.mask[i];
            }
        }
    }
}

struct LinearRule {
    n: usize,
    fin: usize,
    fout: usize,
}

impl<T: Scalar> Backward<T> for LinearRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) {
        let (x, wt) = (ctx.input(0), ctx.input(1));
        let (n, fin, fout) = (self.n, self.fin, self.fout);
        if let Some(dx) = sink.slot(0) {
            T::gemm(n, fout, fin, T::one(), dy, fout as isize, 1, wt, 1, fout as isize, T::one(), dx, fin as isize, 1);
        }
        if let Some(dw) = sink.slot(1) {
            T::gemm(fin, n, fout, T::one(), x, 1, fin as isize, dy, fout as isize, 1, T::one(), dw, fout as isize, 1);
        }
        if let Some(db) = sink.slot(2) {
            for p in dy.chunks(fout) {
                db.iter_mut().zip(p).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2D convolution with a (Kh, Kw, Cin, Cout) kernel and symmetric zero padding.
    pub fn conv2d(self, kernel: Var<'t, T>, bias: Var<'t, T>, spec: Conv2dSpec) -> Result<Var<'t, T>> {
        self.tape.check_owned(&[kernel, bias])?;
        let nodes = self.tape.nodes();
        let (xn, kn, bn) = (&nodes[self.id], &nodes[kernel.id], &nodes[bias.id]);
        let (n, h, w, cin) = nhwc(&xn.shape, "conv2d")?;
        let [kh, kw, kcin, cout] = kn.shape[..] else {
            return Err(Error::shape("conv2d", format!("kernel must be (Kh, Kw, Cin, Cout), got {:?}", kn.shape)));
        };
        if kcin != cin {
            return Err(Error::shape("conv2d", format!("input channels {cin} != kernel Cin {kcin}")));
        }
        if bn.shape != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} != Cout {cout}", bn.shape)));
        }
        let (sh, sw) = spec.stride;
        let (ph, pw) = spec.padding;
        if sh == 0 || sw == 0 {
            return Err(Error::arg("conv2d", "stride must be positive"));
        }
        if h + 2 * ph < kh {
            return Err(Error::shape("conv2d", format!("height {h} (+2*{ph} padding) < kernel height {kh}")));
        }
        if w + 2 * pw < kw {
            return Err(Error::shape("conv2d", format!("width {w} (+2*{pw} padding) < kernel width {kw}")));
        }
        let g = ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            sh,
            sw,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (w + 2 * pw - kw) / sw + 1,
        };
        let k = g.patch();
        let rows = g.ho * g.wo;
        let mut out = vec![T::zero(); n * rows * cout];
        let mut col = vec![T::zero(); rows * k];
        for i in 0..n {
            g.im2col(&xn.value[i * h * w * cin..][..h * w * cin], &mut col);
            let o = &mut out[i * rows * cout..][..rows * cout];
            for p in o.chunks_mut(cout) {
                p.copy_from_slice(&bn.value);
            }
            T::gemm(rows, k, cout, T::one(), &col, k as isize, 1, &kn.value, cout as isize, 1, T::one(), o, cout as isize, 1);
        }
        drop(nodes);
        Ok(self.tape.push(vec![n, g.ho, g.wo, cout], out, &[self, kernel, bias], ConvRule { g, n }))
    }

    /// Average pooling without padding.
    pub fn avgpool2d(self, window: (usize, usize), stride: (usize, usize)) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let xn = &nodes[self.id];
        let (n, h, w, c) = nhwc(&xn.shape, "avgpool2d")?;
        let ((kh, kw), (sh, sw)) = (window, stride);
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::arg("avgpool2d", "window and stride must be positive"));
        }
        if kh > h || kw > w {
            return Err(Error::shape("avgpool2d", format!("window {kh}x{kw} larger than input {h}x{w}")));
        }
        let (ho, wo) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
        let inv = T::one() / T::from_usize_c(kh * kw);
        let mut out = vec![T::zero(); n * ho * wo * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = &mut out[((b * ho + oy) * wo + ox) * c..][..c];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let src = &xn.value[((b * h + oy * sh + ky) * w + ox * sw + kx) * c..][..c];
                            o.iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                        }
                    }
                    o.iter_mut().for_each(|a| *a *= inv);
                }
            }
        }
        drop(nodes);
        let rule = PoolRule { n, h, w, c, kh, kw, sh, sw, ho, wo };
        Ok(self.tape.push(vec![n, ho, wo, c], out, &[self], rule))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(self) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let xn = &nodes[self.id];
        let (n, h, w, c) = nhwc(&xn.shape, "upsample_nearest2")?;
        let mut out = Vec::with_capacity(xn.value.len() * 4);
        for b in 0..n {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out.extend_from_slice(&xn.value[((b * h + y / 2) * w + x / 2) * c..][..c]);
                }
            }
        }
        drop(nodes);
        Ok(self.tape.push(vec![n, 2 * h, 2 * w, c], out, &[self], UpsampleRule { n, h, w, c }))
    }

    /// Per-channel batch normalization over (N, H, W). Returns the batch statistics
    /// when they were computed from the batch.
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        stats: BnStats<'_, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
        if eps <= T::zero() {
            return Err(Error::arg("batchnorm2d", "eps must be positive"));
        }
        self.tape.check_owned(&[gamma, beta])?;
        let nodes = self.tape.nodes();
        let (xn, gn, bn) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
        let c = *xn.shape.last().expect("rank >= 1");
        if gn.shape != [c] || bn.shape != [c] {
            return Err(Error::shape("batchnorm2d", format!("gamma/beta must have {c} entries")));
        }
        let m = xn.value.len() / c;
        let (mean, var, batch) = match stats {
            BnStats::Batch => {
                let mut mean = vec![T::zero(); c];
                for p in xn.value.chunks(c) {
                    mean.iter_mut().zip(p).for_each(|(a, &v)| *a += v);
                }
                let inv_m = T::one() / T::from_usize_c(m);
                mean.iter_mut().for_each(|a| *a *= inv_m);
                let mut var = vec![T::zero(); c];
                for p in xn.value.chunks(c) {
                    for k in 0..c {
                        let d = p[k] - mean[k];
                        var[k] += d * d;
                    }
                }
                var.iter_mut().for_each(|a| *a *= inv_m);
                (mean, var, true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm2d", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = xn.value.clone();
        let mut out = vec![T::zero(); xhat.len()];
        for (xp, op) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            for k in 0..c {
                xp[k] = (xp[k] - mean[k]) * inv_std[k];
                op[k] = gn.value[k] * xp[k] + bn.value[k];
            }
        }
        let shape = xn.shape.clone();
        drop(nodes);
        let rule = BatchNormRule { xhat, inv_std, c, train: batch };
        let y = self.tape.push(shape, out, &[self, gamma, beta], rule);
        Ok((y, batch.then_some(BatchStats { mean, var, count: m })))
    }

    /// Inverted dropout: survivors are scaled by 1 / (1 - rate); eval mode is the identity.
    pub fn dropout<R: Rng>(self, rate: f64, mode: Mode, rng: &mut R) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::arg("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(self);
        }
        let keep = T::from_f64c(1.0 / (1.0 - rate));
        let nodes = self.tape.nodes();
        let xn = &nodes[self.id];
        let mask: Vec<T> = (0..xn.value.len()).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
        let out = xn.value.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = xn.shape.clone();
        drop(nodes);
        Ok(self.tape.push(shape, out, &[self], DropoutRule { mask }))
    }

    /// Affine map of the flattened features: (N, ...) x (Fin, Fout) + (Fout) -> (N, Fout).
    pub fn fully_connected(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check_owned(&[weight, bias])?;
        let nodes = self.tape.nodes();
        let (xn, wn, bn) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
        let n = xn.shape[0];
        let fin = xn.value.len() / n;
        let [wfin, fout] = wn.shape[..] else {
            return Err(Error::shape("fully_connected", format!("weight must be (Fin, Fout), got {:?}", wn.shape)));
        };
        if wfin != fin {
            return Err(Error::shape("fully_connected", format!("input features {fin} != weight Fin {wfin}")));
        }
        if bn.shape != [fout] {
            return Err(Error::shape("fully_connected", format!("bias {:?} != Fout {fout}", bn.shape)));
        }
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(&bn.value);
        }
        T::gemm(n, fin, fout, T::one(), &xn.value, fin as isize, 1, &wn.value, fout as isize, 1, T::one(), &mut out, fout as isize, 1);
        drop(nodes);
        Ok(self.tape.push(vec![n, fout], out, &[self, weight, bias], LinearRule { n, fin, fout }))
    }
}
