//! Pointwise arithmetic, reductions, reshapes, activations and channel plumbing.

use super::tape::{Backward, BackwardCtx, GradSink, Var};
use super::nhwc_of as nhwc;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct AddRule;
impl<T: Scalar> Backward<T> for AddRule {
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        sink.add(0, g);
        sink.add(1, g);
    }
}

struct SubRule;
impl<T: Scalar> Backward<T> for SubRule {
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        sink.add(0, g);
        if let Some(s) = sink.slot(1) {
            s.iter_mut().zip(g).for_each(|(a, &b)| *a -= b);
        }
    }
}

struct MulRule;
impl<T: Scalar> Backward<T> for MulRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        let (a, b) = (ctx.input(0), ctx.input(1));
        if let Some(s) = sink.slot(0) {
            for i in 0..s.len() {
                s[i] += g[i] * b[i];
            }
        }
        if let Some(s) = sink.slot(1) {
            for i in 0..s.len() {
                s[i] += g[i] * a[i];
            }
        }
    }
}

struct ScaleRule<T>(T);
impl<T: Scalar> Backward<T> for ScaleRule<T> {
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(s) = sink.slot(0) {
            s.iter_mut().zip(g).for_each(|(a, &b)| *a += b * self.0);
        }
    }
}

struct PassRule;
impl<T: Scalar> Backward<T> for PassRule {
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        sink.add(0, g);
    }
}

struct SumRule<T>(T);
impl<T: Scalar> Backward<T> for SumRule<T> {
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        let v = g[0] * self.0;
        if let Some(s) = sink.slot(0) {
            s.iter_mut().for_each(|a| *a += v);
        }
    }
}

struct ReluRule;
impl<T: Scalar> Backward<T> for ReluRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        let x = ctx.input(0);
        if let Some(s) = sink.slot(0) {
            for i in 0..s.len() {
                if x[i] > T::zero() {
                    s[i] += g[i];
                }
            }
        }
    }
}

struct EluRule;
impl<T: Scalar> Backward<T> for EluRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        let (x, y) = (ctx.input(0), ctx.output());
        if let Some(s) = sink.slot(0) {
            for i in 0..s.len() {
                // d/dx (exp(x) - 1) = y + 1
                let d = if x[i] > T::zero() { T::one() } else { y[i] + T::one() };
                s[i] += g[i] * d;
            }
        }
    }
}

struct SoftmaxRule {
    channels: usize,
}
impl<T: Scalar> Backward<T> for SoftmaxRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        let y = ctx.output();
        let c = self.channels;
        if let Some(s) = sink.slot(0) {
            for ((sp, yp), gp) in s.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                let dot: T = yp.iter().zip(gp).map(|(&a, &b)| a * b).sum();
                for k in 0..c {
                    sp[k] += yp[k] * (gp[k] - dot);
                }
            }
        }
    }
}

struct ConcatRule {
    ca: usize,
    cb: usize,
}
impl<T: Scalar> Backward<T> for ConcatRule {
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        let c = self.ca + self.cb;
        if let Some(s) = sink.slot(0) {
            for (sp, gp) in s.chunks_mut(self.ca).zip(g.chunks(c)) {
                sp.iter_mut().zip(&gp[..self.ca]).for_each(|(a, &b)| *a += b);
            }
        }
        if let Some(s) = sink.slot(1) {
            for (sp, gp) in s.chunks_mut(self.cb).zip(g.chunks(c)) {
                sp.iter_mut().zip(&gp[self.ca..]).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

struct SliceRule {
    c: usize,
    start: usize,
    len: usize,
}
impl<T: Scalar> Backward<T> for SliceRule {
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(s) = sink.slot(0) {
            for (sp, gp) in s.chunks_mut(self.c).zip(g.chunks(self.len)) {
                sp[self.start..self.start + self.len].iter_mut().zip(gp).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, op: &'static str) -> Result<(Vec<usize>, Vec<T>, Vec<T>)> {
        self.tape.check_owned(&[other])?;
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape != b.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        Ok((a.shape.clone(), a.value.clone(), b.value.clone()))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, a, b) = self.binary(other, "add")?;
        let v = a.iter().zip(&b).map(|(&x, &y)| x + y).collect();
        Ok(self.tape.push(shape, v, &[self, other], AddRule))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, a, b) = self.binary(other, "sub")?;
        let v = a.iter().zip(&b).map(|(&x, &y)| x - y).collect();
        Ok(self.tape.push(shape, v, &[self, other], SubRule))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, a, b) = self.binary(other, "mul")?;
        let v = a.iter().zip(&b).map(|(&x, &y)| x * y).collect();
        Ok(self.tape.push(shape, v, &[self, other], MulRule))
    }

    fn unary(self, f: impl Fn(T) -> T) -> (Vec<usize>, Vec<T>) {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let (shape, v) = self.unary(|x| x * factor);
        self.tape.push(shape, v, &[self], ScaleRule(factor))
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let (shape, v) = self.unary(|x| x + c);
        self.tape.push(shape, v, &[self], PassRule)
    }

    pub fn sum(self) -> Var<'t, T> {
        let total = self.tape.nodes()[self.id].value.iter().copied().sum();
        self.tape.push(vec![1], vec![total], &[self], SumRule(T::one()))
    }

    pub fn mean(self) -> Var<'t, T> {
        let nodes = self.tape.nodes();
        let vals = &nodes[self.id].value;
        let inv = T::one() / T::from_usize_c(vals.len());
        let total = vals.iter().copied().sum::<T>() * inv;
        drop(nodes);
        self.tape.push(vec![1], vec![total], &[self], SumRule(inv))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        super::check_shape(shape)?;
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", n.shape)));
        }
        let v = n.value.clone();
        drop(nodes);
        Ok(self.tape.push(shape.to_vec(), v, &[self], PassRule))
    }

    pub fn relu(self) -> Var<'t, T> {
        let (shape, v) = self.unary(|x| x.max(T::zero()));
        self.tape.push(shape, v, &[self], ReluRule)
    }

    /// ELU with alpha 1.
    pub fn elu(self) -> Var<'t, T> {
        let (shape, v) = self.unary(|x| if x > T::zero() { x } else { x.exp_m1() });
        self.tape.push(shape, v, &[self], EluRule)
    }

    /// Softmax over the last (channel) axis.
    pub fn softmax_channel(self) -> Var<'t, T> {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        let c = *n.shape.last().expect("rank >= 1");
        let mut out = n.value.clone();
        let shape = n.shape.clone();
        drop(nodes);
        softmax_rows(&mut out, c);
        self.tape.push(shape, out, &[self], SoftmaxRule { channels: c })
    }

    pub fn concat_channels(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check_owned(&[other])?;
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let (n, h, w, ca) = nhwc(&a.shape, "concat_channels")?;
        let (nb, hb, wb, cb) = nhwc(&b.shape, "concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial/batch extents differ: {:?} vs {:?}", a.shape, b.shape),
            ));
        }
        let mut v = Vec::with_capacity(a.value.len() + b.value.len());
        for (pa, pb) in a.value.chunks(ca).zip(b.value.chunks(cb)) {
            v.extend_from_slice(pa);
            v.extend_from_slice(pb);
        }
        drop(nodes);
        Ok(self.tape.push(vec![n, h, w, ca + cb], v, &[self, other], ConcatRule { ca, cb }))
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes();
        let a = &nodes[self.id];
        let (n, h, w, c) = nhwc(&a.shape, "slice_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::arg("slice_channels", format!("{start}..{} of {c} channels", start + len)));
        }
        let v: Vec<T> = a.value.chunks(c).flat_map(|p| p[start..start + len].iter().copied()).collect();
        drop(nodes);
        Ok(self.tape.push(vec![n, h, w, len], v, &[self], SliceRule { c, start, len }))
    }
}

pub(crate) fn softmax_rows<T: Scalar>(v: &mut [T], c: usize) {
    for p in v.chunks_mut(c) {
        let m = p.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut z = T::zero();
        for x in p.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        for x in p.iter_mut() {
            *x /= z;
        }
    }
}
