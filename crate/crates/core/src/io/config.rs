//! Run configuration: a line-based `key = value` file with dotted keys and
//! `#` comments. Unknown keys are rejected; numbers use Rust's own
//! (locale-independent) parsers.
//!
//! A single global `seed` feeds every stage. `reg.variant` chooses the
//! default loss weights; explicit `reg.lambda_*` keys override them
//! regardless of line order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::apps::{DEFAULT_ATLASES, PLAUSIBILITY_BUDGET, RCA_ACCEPT_THRESHOLD};
use crate::error::{Error, Result};
use crate::image::NUM_CLASSES;
use crate::losses::TvPenalty;
use crate::synth::{ShapeRange, SynthSpec};
use crate::training::{TrainConfig, Variant};

pub const DAE_DEFAULT_STEPS: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct AppsConfig {
    pub n_atlases: usize,
    pub plausibility_k: usize,
    pub rca_threshold: f64,
    /// Pixel spacing used for distance metrics.
    pub spacing: f64,
}

impl Default for AppsConfig {
    fn default() -> Self {
        AppsConfig { n_atlases: DEFAULT_ATLASES, plausibility_k: PLAUSIBILITY_BUDGET, rca_threshold: RCA_ACCEPT_THRESHOLD, spacing: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub reg: TrainConfig,
    pub dae: TrainConfig,
    pub synth: SynthSpec,
    pub apps: AppsConfig,
}

impl Default for Config {
    fn default() -> Self {
        let mut c = Config {
            seed: 0,
            reg: TrainConfig::for_variant(Variant::AcRegNet),
            dae: TrainConfig { max_steps: DAE_DEFAULT_STEPS, ..TrainConfig::default() },
            synth: SynthSpec::default(),
            apps: AppsConfig::default(),
        };
        c.set_seed(0);
        c
    }
}

const SHAPE_FIELDS: [&str; 5] = ["center_row", "center_col", "semi_axis_row", "semi_axis_col", "rotation"];

fn shape_field<'a>(s: &'a mut ShapeRange, field: &str) -> Option<&'a mut (f64, f64)> {
    Some(match field {
        "center_row" => &mut s.center_row,
        "center_col" => &mut s.center_col,
        "semi_axis_row" => &mut s.semi_axis_row,
        "semi_axis_col" => &mut s.semi_axis_col,
        "rotation" => &mut s.rotation,
        _ => return None,
    })
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list(key: &str, value: &str, n: usize) -> Result<Vec<f64>> {
    let v = value.split(',').map(|x| parse::<f64>(key, x)).collect::<Result<Vec<_>>>()?;
    if v.len() != n {
        return Err(Error::Config(format!("{key}: expected {n} comma-separated numbers, got {}", v.len())));
    }
    Ok(v)
}

fn parse_tv(key: &str, value: &str) -> Result<TvPenalty> {
    match value.trim() {
        "l1" => Ok(TvPenalty::L1),
        v => match v.strip_prefix("charbonnier:") {
            Some(d) => Ok(TvPenalty::Charbonnier(parse(key, d)?)),
            None if v == "charbonnier" => Ok(TvPenalty::Charbonnier(1e-3)),
            None => Err(Error::Config(format!("{key}: expected l1, charbonnier or charbonnier:<delta>, got '{v}'"))),
        },
    }
}

fn tv_text(tv: TvPenalty) -> String {
    match tv {
        TvPenalty::L1 => "l1".into(),
        TvPenalty::Charbonnier(d) => format!("charbonnier:{d}"),
    }
}

fn set_train(cfg: &mut TrainConfig, key: &str, field: &str, value: &str) -> Result<bool> {
    match field {
        "learning_rate" => cfg.learning_rate = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "max_steps" => cfg.max_steps = parse(key, value)?,
        "checkpoint_every" => cfg.checkpoint_every = parse(key, value)?,
        "noise_p" => cfg.noise_p = parse(key, value)?,
        "val_every" => cfg.val_every = parse(key, value)?,
        "val_size" => cfg.val_size = parse(key, value)?,
        "patience" => cfg.patience = parse(key, value)?,
        "min_delta" => cfg.min_delta = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_text(out: &mut String, prefix: &str, c: &TrainConfig) {
    let _ = writeln!(out, "{prefix}.learning_rate = {}", c.learning_rate);
    let _ = writeln!(out, "{prefix}.batch_size = {}", c.batch_size);
    let _ = writeln!(out, "{prefix}.max_steps = {}", c.max_steps);
    let _ = writeln!(out, "{prefix}.checkpoint_every = {}", c.checkpoint_every);
    let _ = writeln!(out, "{prefix}.noise_p = {}", c.noise_p);
    let _ = writeln!(out, "{prefix}.val_every = {}", c.val_every);
    let _ = writeln!(out, "{prefix}.val_size = {}", c.val_size);
    let _ = writeln!(out, "{prefix}.patience = {}", c.patience);
    let _ = writeln!(out, "{prefix}.min_delta = {}", c.min_delta);
}

impl Config {
    /// Propagate the global seed to every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.reg.seed = seed;
        self.dae.seed = seed;
        self.synth.seed = seed;
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
        }
        let mut c = Config::default();
        // Order-sensitive keys first: seed, then the variant (which resets weights).
        if let Some(v) = entries.remove("seed") {
            c.set_seed(parse("seed", &v)?);
        }
        if let Some(v) = entries.remove("reg.variant") {
            c.reg = c.reg.with_variant(parse("reg.variant", &v)?);
        }
        for (key, value) in &entries {
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Err(Error::Config(format!("unknown key '{key}'")));
        let Some((section, field)) = key.split_once('.') else { return unknown() };
        match section {
            "reg" => match field {
                "lambda_r" => self.reg.weights.lambda_r = parse(key, value)?,
                "lambda_ce" => self.reg.weights.lambda_ce = parse(key, value)?,
                "lambda_ae" => self.reg.weights.lambda_ae = parse(key, value)?,
                "tv_penalty" => self.reg.tv_penalty = parse_tv(key, value)?,
                f if set_train(&mut self.reg, key, f, value)? => {}
                _ => return unknown(),
            },
            "dae" => {
                if !set_train(&mut self.dae, key, field, value)? {
                    return unknown();
                }
            }
            "synth" => match field {
                "count" => self.synth.count = parse(key, value)?,
                "size" => self.synth.size = parse(key, value)?,
                "elastic_amplitude" => self.synth.elastic_amplitude = parse(key, value)?,
                "elastic_scale" => self.synth.elastic_scale = parse(key, value)?,
                "shading" => self.synth.shading = parse(key, value)?,
                "noise_std" => self.synth.noise_std = parse(key, value)?,
                "intensities" => {
                    let v = parse_list(key, value, NUM_CLASSES)?;
                    self.synth.intensities.copy_from_slice(&v);
                }
                f => {
                    // synth.shape{1,2,3}.<field> = lo,hi
                    let Some((shape, sub)) = f.split_once('.') else { return unknown() };
                    let idx = match shape {
                        "shape1" => 0,
                        "shape2" => 1,
                        "shape3" => 2,
                        _ => return unknown(),
                    };
                    let Some(range) = shape_field(&mut self.synth.shapes[idx], sub) else { return unknown() };
                    let v = parse_list(key, value, 2)?;
                    *range = (v[0], v[1]);
                }
            },
            "apps" => match field {
                "n_atlases" => self.apps.n_atlases = parse(key, value)?,
                "plausibility_k" => self.apps.plausibility_k = parse(key, value)?,
                "rca_threshold" => self.apps.rca_threshold = parse(key, value)?,
                "spacing" => self.apps.spacing = parse(key, value)?,
                _ => return unknown(),
            },
            _ => return unknown(),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        self.dae.validate()?;
        self.synth.validate()?;
        let a = &self.apps;
        if a.n_atlases == 0 {
            return Err(Error::Config("apps.n_atlases must be positive".into()));
        }
        if !(a.rca_threshold.is_finite() && (0.0..=1.0).contains(&a.rca_threshold)) {
            return Err(Error::Config("apps.rca_threshold must lie in [0, 1]".into()));
        }
        if !(a.spacing > 0.0 && a.spacing.is_finite()) {
            return Err(Error::Config("apps.spacing must be positive".into()));
        }
        Ok(())
    }

    /// The effective configuration in the same format `parse` accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let r = &self.reg;
        let _ = writeln!(out, "reg.variant = {}", r.variant.name());
        let _ = writeln!(out, "reg.lambda_r = {}", r.weights.lambda_r);
        let _ = writeln!(out, "reg.lambda_ce = {}", r.weights.lambda_ce);
        let _ = writeln!(out, "reg.lambda_ae = {}", r.weights.lambda_ae);
        let _ = writeln!(out, "reg.tv_penalty = {}", tv_text(r.tv_penalty));
        train_text(&mut out, "reg", r);
        train_text(&mut out, "dae", &self.dae);
        let s = &self.synth;
        let _ = writeln!(out, "synth.count = {}", s.count);
        let _ = writeln!(out, "synth.size = {}", s.size);
        let _ = writeln!(out, "synth.elastic_amplitude = {}", s.elastic_amplitude);
        let _ = writeln!(out, "synth.elastic_scale = {}", s.elastic_scale);
        let _ = writeln!(out, "synth.shading = {}", s.shading);
        let _ = writeln!(out, "synth.noise_std = {}", s.noise_std);
        let ints: Vec<String> = s.intensities.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "synth.intensities = {}", ints.join(","));
        for (i, shape) in s.shapes.iter().enumerate() {
            let mut shape = shape.clone();
            for f in SHAPE_FIELDS {
                let (lo, hi) = *shape_field(&mut shape, f).expect("known field");
                let _ = writeln!(out, "synth.shape{}.{f} = {lo},{hi}", i + 1);
            }
        }
        let a = &self.apps;
        let _ = writeln!(out, "apps.n_atlases = {}", a.n_atlases);
        let _ = writeln!(out, "apps.plausibility_k = {}", a.plausibility_k);
        let _ = writeln!(out, "apps.rca_threshold = {}", a.rca_threshold);
        let _ = writeln!(out, "apps.spacing = {}", a.spacing);
        out
    }
}
