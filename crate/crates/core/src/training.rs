//! Two-stage training: the mask autoencoder first, then the field predictor
//! against the composite objective with the encoder frozen.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{LabelMask, NUM_CLASSES};
use crate::losses::{ce_with_logits, composite_loss, CodeEncoder, CompositeInputs, LossTerms, LossWeights, TvPenalty};
use crate::models::{corrupt_mask, pair_tensor, Autoencoder, Forward, VectorCnn};
use crate::scalar::Scalar;
use crate::synth::Sample;
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::{seeded_rng, SeededRng};

/// Which anatomical terms enter the registration objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    RegNet,
    CeRegNet,
    AeRegNet,
    AcRegNet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::RegNet, Variant::CeRegNet, Variant::AeRegNet, Variant::AcRegNet];

    pub fn weights(self) -> LossWeights {
        let LossWeights { lambda_r, lambda_ce, lambda_ae } = LossWeights::PAPER;
        let (ce, ae) = match self {
            Variant::RegNet => (0.0, 0.0),
            Variant::CeRegNet => (lambda_ce, 0.0),
            Variant::AeRegNet => (0.0, lambda_ae),
            Variant::AcRegNet => (lambda_ce, lambda_ae),
        };
        LossWeights { lambda_r, lambda_ce: ce, lambda_ae: ae }
    }

    pub fn needs_autoencoder(self) -> bool {
        matches!(self, Variant::AeRegNet | Variant::AcRegNet)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::RegNet => "regnet",
            Variant::CeRegNet => "ce",
            Variant::AeRegNet => "ae",
            Variant::AcRegNet => "ac",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regnet" | "reg" => Ok(Variant::RegNet),
            "ce" | "ce-regnet" => Ok(Variant::CeRegNet),
            "ae" | "ae-regnet" => Ok(Variant::AeRegNet),
            "ac" | "ac-regnet" => Ok(Variant::AcRegNet),
            _ => Err(Error::Config(format!("unknown variant '{s}' (expected regnet, ce, ae or ac)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub weights: LossWeights,
    pub tv_penalty: TvPenalty,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Border-swap probability of the autoencoder's noise model.
    pub noise_p: f64,
    /// Evaluate the validation loss every this many steps (0 disables early stopping).
    pub val_every: usize,
    /// Validation pairs or masks evaluated at each check.
    pub val_size: usize,
    /// Stop once the validation loss has not improved by `min_delta` for this many steps.
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_variant(Variant::AcRegNet)
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        TrainConfig {
            variant,
            weights: variant.weights(),
            tv_penalty: TvPenalty::L1,
            learning_rate: 1e-3,
            batch_size: 32,
            max_steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            noise_p: 0.1,
            val_every: 50,
            val_size: 32,
            patience: 200,
            min_delta: 1e-4,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.weights = variant.weights();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |d: &str| Err(Error::Config(d.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.noise_p) {
            return bad("noise_p must lie in [0, 1]");
        }
        if self.min_delta < 0.0 {
            return bad("min_delta must be >= 0");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }
}

/// One line of a loss log. For autoencoder training only `ce` and `total` are used.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub terms: LossTerms,
    /// Validation total, on steps where it was evaluated.
    pub val_total: Option<f64>,
}

pub const LOSS_CSV_HEADER: &str = "step,ncc,tv,ce,ae,total,val_total";

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in log {
        let t = &r.terms;
        let val = r.val_total.map_or_else(String::new, |v| format!("{v:.9e}"));
        let _ = writeln!(s, "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{val}", r.step, t.ncc, t.tv, t.ce, t.ae, t.total);
    }
    s
}

/// Why a training loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
}

#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub log: Vec<LossRecord>,
    pub steps: usize,
    pub stop: StopReason,
}

/// Validation-based early stopping.
struct Stopper {
    best: f64,
    best_step: usize,
    patience: usize,
    min_delta: f64,
}

impl Stopper {
    fn new(cfg: &TrainConfig) -> Self {
        Stopper { best: f64::INFINITY, best_step: 0, patience: cfg.patience, min_delta: cfg.min_delta }
    }

    /// Record a validation value at `step`; true when training should stop.
    fn update(&mut self, step: usize, value: f64) -> bool {
        if value < self.best - self.min_delta {
            self.best = value;
            self.best_step = step;
        }
        step - self.best_step >= self.patience
    }
}

fn non_finite(what: &str, step: usize) -> Error {
    Error::NonFinite(format!("{what} loss is not finite at step {step}"))
}

/// Called with (step, model) at each checkpoint.
pub type CheckpointFn<'a, M> = dyn FnMut(usize, &M) -> Result<()> + 'a;

// ---------------------------------------------------------------------------
// Stage 1: denoising autoencoder

fn dae_batch<T: Scalar>(masks: &[LabelMask], idx: &[usize], p: f64, rng: &mut SeededRng) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut noisy = Vec::with_capacity(idx.len());
    let mut clean = Vec::with_capacity(idx.len());
    for &i in idx {
        noisy.push(corrupt_mask(&masks[i], p, rng)?.to_onehot::<T>(NUM_CLASSES)?);
        clean.push(masks[i].to_onehot::<T>(NUM_CLASSES)?);
    }
    Ok((Tensor::stack_batch(&noisy)?, Tensor::stack_batch(&clean)?))
}

fn check_masks(masks: &[LabelMask], what: &str) -> Result<()> {
    if masks.is_empty() {
        return Err(Error::Empty(format!("{what} mask set")));
    }
    for m in masks {
        if (m.height, m.width) != (64, 64) {
            return Err(Error::shape("train_dae", format!("{what} masks must be 64x64, got {}x{}", m.height, m.width)));
        }
        if m.max_label() as usize >= NUM_CLASSES {
            return Err(Error::arg("train_dae", format!("label {} outside the {NUM_CLASSES} classes", m.max_label())));
        }
    }
    Ok(())
}

/// Mean clean-reconstruction cross-entropy of `model` (eval mode) on `masks`.
pub fn dae_eval_loss<T: Scalar>(model: &Autoencoder<T>, masks: &[LabelMask]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in masks.chunks(32) {
        let x = Tensor::stack_batch(&chunk.iter().map(|m| m.to_onehot::<T>(NUM_CLASSES)).collect::<Result<Vec<_>>>()?)?;
        let tape = Tape::new();
        let xv = tape.constant(x);
        let logits = model.forward(xv, &mut Forward::eval())?;
        total += ce_with_logits(logits, xv)?.item().to_f64c() * chunk.len() as f64;
    }
    Ok(total / masks.len() as f64)
}

/// Train the denoising autoencoder: corrupt, reconstruct, cross-entropy
/// against the clean mask, Adam step. Batches are drawn with replacement.
pub fn train_dae<T: Scalar>(
    train: &[LabelMask],
    val: &[LabelMask],
    cfg: &TrainConfig,
    mut checkpoint: Option<&mut CheckpointFn<'_, Autoencoder<T>>>,
) -> Result<Trained<Autoencoder<T>>> {
    cfg.validate()?;
    check_masks(train, "training")?;
    let mut model = Autoencoder::<T>::new(cfg.seed);
    let mut adam = AdamState::new(&model.params, cfg.adam());
    let mut rng = seeded_rng(cfg.seed.wrapping_add(1));
    let val: Vec<LabelMask> = val.iter().take(cfg.val_size).cloned().collect();
    let mut stopper = Stopper::new(cfg);
    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut stop = StopReason::MaxSteps;
    for step in 1..=cfg.max_steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..train.len())).collect();
        let (noisy, clean) = dae_batch::<T>(train, &idx, cfg.noise_p, &mut rng)?;
        let tape = Tape::new();
        let logits = model.forward_train(tape.constant(noisy), &mut rng)?;
        let loss = ce_with_logits(logits, tape.constant(clean))?;
        let value = loss.item().to_f64c();
        if !value.is_finite() {
            return Err(non_finite("autoencoder", step));
        }
        tape.backward(loss)?;
        model.params.accumulate_grads(&tape);
        adam.step(&mut model.params);
        let mut rec = LossRecord { step, terms: LossTerms { ce: value, total: value, ..Default::default() }, val_total: None };
        let mut halt = false;
        if cfg.val_every > 0 && !val.is_empty() && step % cfg.val_every == 0 {
            let v = dae_eval_loss(&model, &val)?;
            rec.val_total = Some(v);
            halt = stopper.update(step, v);
        }
        log.push(rec);
        if let Some(cb) = checkpoint.as_deref_mut() {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                cb(step, &model)?;
            }
        }
        if halt {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    let steps = log.len();
    Ok(Trained { model, log, steps, stop })
}

// ---------------------------------------------------------------------------
// Stage 2: registration network

/// Draw `batch_size` ordered (source, target) index pairs uniformly with
/// replacement, never pairing a sample with itself.
pub fn sample_pairs(fold_len: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if fold_len < 2 {
        return Err(Error::Empty(format!("fold of {fold_len} sample(s) has no distinct pair")));
    }
    Ok((0..batch_size)
        .map(|_| {
            let s = rng.gen_range(0..fold_len);
            let t = (s + rng.gen_range(1..fold_len)) % fold_len;
            (s, t)
        })
        .collect())
}

/// Network inputs and loss targets for a batch of pairs.
pub struct PairBatch<T> {
    /// (N, 64, 64, 2): source then target intensity.
    pub pairs: Tensor<T>,
    pub source_images: Tensor<T>,
    pub target_images: Tensor<T>,
    /// One-hot masks; present when the objective uses them.
    pub masks: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn new(samples: &[Sample], pairs: &[(usize, usize)], with_masks: bool) -> Result<Self> {
        let src: Vec<_> = pairs.iter().map(|&(s, _)| &samples[s]).collect();
        let tgt: Vec<_> = pairs.iter().map(|&(_, t)| &samples[t]).collect();
        let img = |v: &[&Sample]| Tensor::stack_batch(&v.iter().map(|s| s.image.to_tensor::<T>()).collect::<Vec<_>>());
        let onehot = |v: &[&Sample]| -> Result<Tensor<T>> {
            Tensor::stack_batch(&v.iter().map(|s| s.mask.to_onehot::<T>(NUM_CLASSES)).collect::<Result<Vec<_>>>()?)
        };
        let pair_refs: Vec<_> = src.iter().zip(&tgt).map(|(s, t)| (&s.image, &t.image)).collect();
        Ok(PairBatch {
            pairs: pair_tensor(&pair_refs)?,
            source_images: img(&src)?,
            target_images: img(&tgt)?,
            masks: if with_masks { Some((onehot(&src)?, onehot(&tgt)?)) } else { None },
        })
    }
}

/// Composite objective of a predicted `field` on one batch.
fn registration_objective<'t, T: Scalar>(
    tape: &'t Tape<T>,
    field: Var<'t, T>,
    batch: &PairBatch<T>,
    encoder: Option<&dyn CodeEncoder<T>>,
    cfg: &TrainConfig,
) -> Result<(Var<'t, T>, LossTerms)> {
    let warped_image = tape.constant(batch.source_images.clone()).warp(field)?;
    let (warped_mask, target_mask) = match &batch.masks {
        Some((s, t)) => (Some(tape.constant(s.clone()).warp_onehot(field)?), Some(tape.constant(t.clone()))),
        None => (None, None),
    };
    let inputs = CompositeInputs { warped_image, target_image: tape.constant(batch.target_images.clone()), warped_mask, target_mask, field };
    composite_loss(&inputs, cfg.weights, cfg.tv_penalty, encoder)
}

/// Eval-mode objective averaged over `pairs` of `samples`.
pub fn registration_eval_loss<T: Scalar>(
    net: &VectorCnn<T>,
    samples: &[Sample],
    pairs: &[(usize, usize)],
    encoder: Option<&Autoencoder<T>>,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let uses_masks = cfg.weights.lambda_ce > 0.0 || cfg.weights.lambda_ae > 0.0;
    let mut sum = LossTerms::default();
    for chunk in pairs.chunks(cfg.batch_size.max(1)) {
        let batch = PairBatch::new(samples, chunk, uses_masks)?;
        let tape = Tape::new();
        let field = net.forward(tape.constant(batch.pairs.clone()), &mut Forward::eval())?;
        let (_, t) = registration_objective(&tape, field, &batch, encoder.map(|e| e as &dyn CodeEncoder<T>), cfg)?;
        let k = chunk.len() as f64;
        sum.ncc += t.ncc * k;
        sum.tv += t.tv * k;
        sum.ce += t.ce * k;
        sum.ae += t.ae * k;
        sum.total += t.total * k;
    }
    let n = pairs.len() as f64;
    Ok(LossTerms { ncc: sum.ncc / n, tv: sum.tv / n, ce: sum.ce / n, ae: sum.ae / n, total: sum.total / n })
}

/// Train the field predictor on pairs from `train` under the configured
/// variant. The autoencoder, required by the variants with a code-space term,
/// must already be frozen; every step verifies that none of its parameters
/// received a gradient.
pub fn train_regnet<T: Scalar>(
    train: &[Sample],
    val: &[Sample],
    dae: Option<&Autoencoder<T>>,
    cfg: &TrainConfig,
    mut checkpoint: Option<&mut CheckpointFn<'_, VectorCnn<T>>>,
) -> Result<Trained<VectorCnn<T>>> {
    cfg.validate()?;
    let encoder = match (cfg.weights.lambda_ae > 0.0, dae) {
        (true, None) => return Err(Error::MissingAutoencoder("variants with a code-space loss need a trained autoencoder")),
        (true, Some(d)) if !d.params.is_frozen() => return Err(Error::EncoderNotFrozen),
        (true, Some(d)) => Some(d),
        (false, _) => None,
    };
    if train.len() < 2 {
        return Err(Error::Empty(format!("training fold of {} sample(s) has no distinct pair", train.len())));
    }
    let uses_masks = cfg.weights.lambda_ce > 0.0 || cfg.weights.lambda_ae > 0.0;
    let mut net = VectorCnn::<T>::new(cfg.seed);
    let mut adam = AdamState::new(&net.params, cfg.adam());
    let mut rng = seeded_rng(cfg.seed.wrapping_add(1));
    let val_pairs = if val.len() >= 2 { sample_pairs(val.len(), cfg.val_size, &mut seeded_rng(cfg.seed.wrapping_add(2)))? } else { Vec::new() };
    let mut stopper = Stopper::new(cfg);
    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut stop = StopReason::MaxSteps;
    for step in 1..=cfg.max_steps {
        let pairs = sample_pairs(train.len(), cfg.batch_size, &mut rng)?;
        let batch = PairBatch::<T>::new(train, &pairs, uses_masks)?;
        let tape = Tape::new();
        let field = net.forward_train(tape.constant(batch.pairs.clone()), &mut rng)?;
        let (loss, terms) = registration_objective(&tape, field, &batch, encoder.map(|e| e as &dyn CodeEncoder<T>), cfg)?;
        if !terms.is_finite() {
            return Err(non_finite("registration", step));
        }
        tape.backward(loss)?;
        if let Some(d) = encoder {
            if tape.touched_params(d.params.uid()) {
                return Err(Error::EncoderNotFrozen);
            }
        }
        net.params.accumulate_grads(&tape);
        adam.step(&mut net.params);
        let mut rec = LossRecord { step, terms, val_total: None };
        let mut halt = false;
        if cfg.val_every > 0 && !val_pairs.is_empty() && step % cfg.val_every == 0 {
            let v = registration_eval_loss(&net, val, &val_pairs, encoder, cfg)?.total;
            rec.val_total = Some(v);
            halt = stopper.update(step, v);
        }
        log.push(rec);
        if let Some(cb) = checkpoint.as_deref_mut() {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                cb(step, &net)?;
            }
        }
        if halt {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    let steps = log.len();
    Ok(Trained { model: net, log, steps, stop })
}
