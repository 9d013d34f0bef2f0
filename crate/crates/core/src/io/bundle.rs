//! Model bundles: a parameter container whose header records the
//! architecture, seed and number of training steps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{autoencoder, vectorcnn, Autoencoder, VectorCnn};
use crate::scalar::Scalar;
use crate::tensor::container::Container;
use crate::tensor::ParamSet;

/// A network that can be rebuilt from its seed and then filled from a bundle.
pub trait Bundled: Sized {
    const ARCH: &'static str;
    type Scalar: Scalar;
    fn build(seed: u64) -> Self;
    fn params(&self) -> &ParamSet<Self::Scalar>;
    fn params_mut(&mut self) -> &mut ParamSet<Self::Scalar>;
    fn seed(&self) -> u64;
}

impl<T: Scalar> Bundled for VectorCnn<T> {
    const ARCH: &'static str = vectorcnn::ARCH_NAME;
    type Scalar = T;
    fn build(seed: u64) -> Self {
        VectorCnn::new(seed)
    }
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
    fn seed(&self) -> u64 {
        self.seed
    }
}

impl<T: Scalar> Bundled for Autoencoder<T> {
    const ARCH: &'static str = autoencoder::ARCH_NAME;
    type Scalar = T;
    fn build(seed: u64) -> Self {
        Autoencoder::new(seed)
    }
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
    fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundleInfo {
    pub arch: String,
    pub seed: u64,
    pub steps: usize,
}

pub fn bundle_container<M: Bundled>(model: &M, steps: usize) -> Container {
    let mut c = Container {
        header: vec![
            ("arch".into(), M::ARCH.into()),
            ("seed".into(), model.seed().to_string()),
            ("steps".into(), steps.to_string()),
        ],
        arrays: Vec::new(),
    };
    for (name, t) in model.params().named_arrays() {
        c.push_array(name, &t);
    }
    c
}

pub fn save_bundle<M: Bundled>(path: impl AsRef<Path>, model: &M, steps: usize) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    bundle_container(model, steps).save(path)
}

pub fn load_bundle<M: Bundled>(path: impl AsRef<Path>) -> Result<(M, BundleInfo)> {
    let path = path.as_ref();
    let c = Container::load(path)?;
    let field = |k: &str| c.header_value(k).ok_or_else(|| Error::Format(format!("{}: bundle header lacks '{k}'", path.display())));
    let arch = field("arch")?.to_string();
    if arch != M::ARCH {
        return Err(Error::Format(format!("{}: bundle holds '{arch}', expected '{}'", path.display(), M::ARCH)));
    }
    let num = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| Error::Format(format!("{}: bad '{k}' in bundle header", path.display()))) };
    let info = BundleInfo { arch, seed: num("seed")?, steps: num("steps")? as usize };
    let mut model = M::build(info.seed);
    model.params_mut().load_named(&c.arrays_as())?;
    Ok((model, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::NUM_CLASSES;
    use crate::synth::{generate, SynthSpec};

    #[test]
    fn round_trip_reproduces_eval_outputs() {
        let dir = std::env::temp_dir().join(format!("acreg-bundle-{}", std::process::id()));
        let data = generate(&SynthSpec { count: 2, ..SynthSpec::default() }).unwrap();
        let mut net = VectorCnn::<f32>::new(5);
        // Perturb a running statistic so non-trainable state is exercised.
        let key = net.params.find("down16a.bn.running_mean").unwrap();
        net.params.get_mut(key).value.data_mut()[0] = 0.25;
        save_bundle(dir.join("v.bundle"), &net, 17).unwrap();
        let (back, info): (VectorCnn<f32>, _) = load_bundle(dir.join("v.bundle")).unwrap();
        assert_eq!(info, BundleInfo { arch: vectorcnn::ARCH_NAME.into(), seed: 5, steps: 17 });
        let a = net.predict_field(&data[0].image, &data[1].image).unwrap();
        let b = back.predict_field(&data[0].image, &data[1].image).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());

        let ae = Autoencoder::<f32>::new(3);
        save_bundle(dir.join("a.bundle"), &ae, 0).unwrap();
        let (ae2, _): (Autoencoder<f32>, _) = load_bundle(dir.join("a.bundle")).unwrap();
        let x = data[0].mask.to_onehot::<f32>(NUM_CLASSES).unwrap();
        assert_eq!(ae.encode(&x).unwrap(), ae2.encode(&x).unwrap());
        assert!(matches!(load_bundle::<VectorCnn<f32>>(dir.join("a.bundle")), Err(Error::Format(_))));
    }
}
