use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey(pub usize);

/// A named learnable (or frozen) array with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// The parameters of one network. Every set carries a process-unique id so that
/// several networks can share a tape without their gradients mixing.
#[derive(Debug)]
pub struct ParamSet<T> {
    uid: u64,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        ParamSet { uid: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed), params: self.params.clone() }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { uid: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed), params: Vec::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamKey {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.into(), value, grad, trainable });
        ParamKey(self.params.len() - 1)
    }

    pub fn get(&self, key: ParamKey) -> &Param<T> {
        &self.params[key.0]
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut Param<T> {
        &mut self.params[key.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamKey> {
        self.params.iter().position(|p| p.name == name).map(ParamKey)
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Bind a parameter as a leaf of `tape`.
    pub fn var<'t>(&self, tape: &'t Tape<T>, key: ParamKey) -> Var<'t, T> {
        let p = &self.params[key.0];
        tape.param_leaf(p.value.clone(), p.trainable, (self.uid, key.0))
    }

    /// Mark every parameter as non-trainable.
    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Add the gradients a finished backward pass produced for this set's leaves.
    /// Non-trainable parameters are never touched.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for (index, grad) in tape.param_grads(self.uid) {
            let p = &mut self.params[index];
            if !p.trainable {
                continue;
            }
            for (acc, g) in p.grad.data_mut().iter_mut().zip(grad) {
                *acc += g;
            }
        }
    }

    /// Largest absolute gradient entry over all parameters.
    pub fn grad_max_abs(&self) -> T {
        self.params.iter().fold(T::zero(), |m, p| m.max(p.grad.max_abs()))
    }

    /// FNV-1a digest over names and the 64-bit patterns of all values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_f64c().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Same parameters in another precision, with a fresh set id.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast(), p.trainable);
        }
        out
    }

    /// Overwrite values by name from `(name, tensor)` pairs. Every parameter must be present.
    pub fn load_named(&mut self, arrays: &[(String, Tensor<T>)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = arrays
                .iter()
                .find(|(n, _)| n == &p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(
                    "load_named",
                    format!("{}: stored {:?}, expected {:?}", p.name, t.shape(), p.value.shape()),
                ));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn named_arrays(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}

/// Zero-mean uniform weights with variance `2 / fan_in`.
pub fn init_weight<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64c(rng.gen_range(-bound..bound)))
}

pub fn init_bias<T: Scalar>(len: usize) -> Tensor<T> {
    Tensor::zeros(&[len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_variance_is_two_over_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Tensor<f64> = init_weight(&[200, 100], 50, &mut rng);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01);
        assert!((var - 2.0 / 50.0).abs() < 0.002, "var {var}");
    }

    #[test]
    fn clone_gets_a_fresh_identity() {
        let mut a = ParamSet::<f32>::new();
        a.add("w", Tensor::zeros(&[2]), true);
        let b = a.clone();
        assert_ne!(a.uid(), b.uid());
        assert_eq!(a.checksum(), b.checksum());
    }
}
