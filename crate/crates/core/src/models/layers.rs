//! Parameterised building blocks shared by both networks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{init_bias, init_weight, BnStats, Conv2dSpec, Mode, ParamKey, ParamSet, Tape, Tensor, Var};
use crate::SeededRng;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Per-call forward state: mode, dropout randomness, pending batch-norm
/// running-statistic updates and an optional shape trace.
pub struct Forward<'r, T> {
    pub mode: Mode,
    rng: Option<&'r mut SeededRng>,
    updates: Vec<(ParamKey, ParamKey, Vec<T>, Vec<T>, usize)>,
    trace: Option<Vec<(String, Vec<usize>)>>,
}

impl<'r, T: Scalar> Forward<'r, T> {
    pub fn eval() -> Self {
        Forward { mode: Mode::Eval, rng: None, updates: Vec::new(), trace: None }
    }

    pub fn train(rng: &'r mut SeededRng) -> Self {
        Forward { mode: Mode::Train, rng: Some(rng), updates: Vec::new(), trace: None }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn take_trace(&mut self) -> Vec<(String, Vec<usize>)> {
        self.trace.take().unwrap_or_default()
    }

    pub(crate) fn record(&mut self, label: &str, v: Var<'_, T>) {
        if let Some(t) = self.trace.as_mut() {
            t.push((label.to_string(), v.shape()[1..].to_vec()));
        }
    }

    pub(crate) fn dropout<'t>(&mut self, x: Var<'t, T>, rate: f64) -> Result<Var<'t, T>> {
        match (self.mode, self.rng.as_deref_mut()) {
            (Mode::Eval, _) => Ok(x),
            (Mode::Train, Some(rng)) => x.dropout(rate, Mode::Train, rng),
            (Mode::Train, None) => Err(Error::arg("dropout", "train mode needs a random generator")),
        }
    }

    /// Fold the batch statistics gathered during a train-mode pass into the running averages.
    pub fn commit(self, params: &mut ParamSet<T>) {
        let m = T::from_f64c(BN_MOMENTUM);
        for (mean_key, var_key, mean, var, count) in self.updates {
            let unbias = if count > 1 { T::from_usize_c(count) / T::from_usize_c(count - 1) } else { T::one() };
            for (r, &b) in params.get_mut(mean_key).value.data_mut().iter_mut().zip(&mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in params.get_mut(var_key).value.data_mut().iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    kernel: ParamKey,
    bias: ParamKey,
    spec: Conv2dSpec,
}

impl Conv {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, spec: Conv2dSpec, rng: &mut impl Rng) -> Self {
        let kernel = ps.add(format!("{name}.kernel"), init_weight(&[3, 3, cin, cout], 9 * cin, rng), true);
        let bias = ps.add(format!("{name}.bias"), init_bias(cout), true);
        Conv { kernel, bias, spec }
    }

    pub fn forward<'t, T: Scalar>(&self, ps: &ParamSet<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        x.conv2d(ps.var(tape, self.kernel), ps.var(tape, self.bias), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamKey,
    beta: ParamKey,
    running_mean: ParamKey,
    running_var: ParamKey,
}

impl BatchNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()), true),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[c]), true),
            running_mean: ps.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
            running_var: ps.add(format!("{name}.running_var"), Tensor::full(&[c], T::one()), false),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ps: &ParamSet<T>, x: Var<'t, T>, fwd: &mut Forward<'_, T>) -> Result<Var<'t, T>> {
        let tape: &'t Tape<T> = x.tape();
        let (gamma, beta) = (ps.var(tape, self.gamma), ps.var(tape, self.beta));
        let eps = T::from_f64c(BN_EPS);
        match fwd.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm(gamma, beta, BnStats::Batch, eps)?;
                let stats = stats.expect("batch statistics in train mode");
                fwd.updates.push((self.running_mean, self.running_var, stats.mean, stats.var, stats.count));
                Ok(y)
            }
            Mode::Eval => {
                let mean = ps.get(self.running_mean).value.data();
                let var = ps.get(self.running_var).value.data();
                Ok(x.batch_norm(gamma, beta, BnStats::Running { mean, var }, eps)?.0)
            }
        }
    }
}

/// Convolution followed by batch normalization.
#[derive(Clone, Debug)]
pub struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBn {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, spec: Conv2dSpec, rng: &mut impl Rng) -> Self {
        ConvBn { conv: Conv::new(ps, name, cin, cout, spec, rng), bn: BatchNorm::new(ps, &format!("{name}.bn"), cout) }
    }

    pub fn forward<'t, T: Scalar>(&self, ps: &ParamSet<T>, x: Var<'t, T>, fwd: &mut Forward<'_, T>) -> Result<Var<'t, T>> {
        let y = self.conv.forward(ps, x)?;
        self.bn.forward(ps, y, fwd)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    weight: ParamKey,
    bias: ParamKey,
}

impl Dense {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        Dense {
            weight: ps.add(format!("{name}.weight"), init_weight(&[fin, fout], fin, rng), true),
            bias: ps.add(format!("{name}.bias"), init_bias(fout), true),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ps: &ParamSet<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        x.fully_connected(ps.var(tape, self.weight), ps.var(tape, self.bias))
    }
}
