//! `acreg`: synthetic data, two-stage training, registration, evaluation and
//! the downstream applications, one subcommand each.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acreg::apps::{codes_csv, extract_codes, multi_atlas_segment, plausibility_csv, plausibility_experiment, rca_csv, rca_estimate, Atlas};
use acreg::image::{LabelMask, NUM_CLASSES};
use acreg::io::manifest::records_to_samples;
use acreg::io::{load_bundle, load_image, load_mask, save_bundle, save_field_pfm, save_image_pgm, save_mask_pgm, write_dataset, Config, Fold, Manifest, Record};
use acreg::metrics::{reports_to_csv, MetricReport};
use acreg::models::{Autoencoder, VectorCnn};
use acreg::synth::{generate, split, SPLIT_FRACTIONS};
use acreg::tensor::container::Container;
use acreg::training::{loss_log_csv, train_dae, train_regnet, Trained, Variant};
use acreg::warp::{hard_labels, warp_onehot_tensor, warp_tensor};
use acreg::Error;
use clap::{Args, Parser, Subcommand};

type Net = VectorCnn<f32>;
type Dae = Autoencoder<f32>;

#[derive(Parser)]
#[command(name = "acreg", version, about = "Anatomically constrained deformable registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` lines); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Global seed; overrides ACREG_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Save a checkpoint bundle every N steps (0 disables).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the denoising autoencoder on a dataset's masks.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the registration network (stage two).
    TrainReg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        data: PathBuf,
        /// regnet, ce, ae or ac.
        #[arg(long)]
        variant: Option<Variant>,
        /// Trained autoencoder bundle (needed by the ae and ac variants).
        #[arg(long)]
        dae: Option<PathBuf>,
    },
    /// Register a source image onto a target image.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Optional source mask to carry along.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Registration metrics over pairs of one fold of a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest (or directory).
        #[arg(long)]
        pairs: PathBuf,
        /// Registration bundle; without it the unregistered baseline is scored.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Pixel spacing (e.g. mm per pixel) for HD and ASSD.
        #[arg(long)]
        spacing: Option<f64>,
        #[arg(long, default_value = "test")]
        fold: String,
    },
    /// Local vs global loss on plausible and implausible mask edits.
    Plausibility {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dae: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Pixels changed per variant.
        #[arg(long)]
        k: Option<usize>,
        /// Number of masks to use.
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// Multi-atlas segmentation of target images.
    Multiatlas {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Dataset whose training fold provides the atlases.
        #[arg(long)]
        atlases: PathBuf,
        /// Target images (repeatable).
        #[arg(long, required = true)]
        target: Vec<PathBuf>,
        #[arg(long)]
        n_atlases: Option<usize>,
    },
    /// Reverse classification accuracy estimates for predicted masks.
    Rca {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Dataset whose training fold provides the references.
        #[arg(long)]
        references: PathBuf,
        /// Manifest of images with their predicted masks.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Export 32-dimensional anatomical codes of masks.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dae: PathBuf,
        /// Manifest (or dataset directory) listing the masks.
        #[arg(long)]
        masks: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_) | Error::InvalidArgument { .. } | Error::MissingAutoencoder(_)) => 1,
            Failure::Core(Error::NonFinite(_)) => 3,
            Failure::Core(_) => 2,
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Config file, then ACREG_SEED, then flags.
fn load_config(common: &Common) -> Outcome<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Ok(v) = std::env::var("ACREG_SEED") {
        let seed = v.trim().parse().map_err(|_| usage(format!("ACREG_SEED must be an unsigned integer, got '{v}'")))?;
        cfg.set_seed(seed);
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn prepare_out(common: &Common, cfg: &Config) -> Outcome<PathBuf> {
    let out = common.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join("effective_config.txt"), &cfg.to_text())?;
    Ok(out)
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn apply_train_flags(cfg: &mut acreg::training::TrainConfig, f: &TrainFlags) -> Outcome {
    if let Some(v) = f.steps {
        cfg.max_steps = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = f.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate()?;
    Ok(())
}

fn load_fold(data: &Path, fold: Fold) -> Outcome<Vec<Record>> {
    Ok(Manifest::read(data)?.load(Some(fold))?)
}

fn report_training<M>(what: &str, t: &Trained<M>) {
    let last = t.log.last().map(|r| r.terms.total).unwrap_or(f64::NAN);
    eprintln!("{what}: {} steps ({:?}), final loss {last:.6}", t.steps, t.stop);
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synth { common, count } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = count {
                cfg.synth.count = c;
            }
            cfg.validate()?;
            let out = prepare_out(&common, &cfg)?;
            let samples = generate(&cfg.synth)?;
            let folds = split(samples.len(), SPLIT_FRACTIONS, cfg.seed)?;
            write_dataset(&out, &samples, &folds)?;
            eprintln!("wrote {} samples ({} train / {} val / {} test)", samples.len(), folds.train.len(), folds.val.len(), folds.test.len());
        }
        Command::TrainAe { common, train, data } => {
            let mut cfg = load_config(&common)?;
            apply_train_flags(&mut cfg.dae, &train)?;
            let out = prepare_out(&common, &cfg)?;
            let masks = |fold| -> Outcome<Vec<LabelMask>> { Ok(load_fold(&data, fold)?.into_iter().map(|r| r.mask).collect()) };
            let (tr, va) = (masks(Fold::Train)?, masks(Fold::Val)?);
            let ckpt_dir = out.clone();
            let mut save = move |step: usize, m: &Dae| save_bundle(ckpt_dir.join(format!("dae.step{step}.bundle")), m, step);
            let trained = train_dae::<f32>(&tr, &va, &cfg.dae, Some(&mut save))?;
            report_training("autoencoder", &trained);
            save_bundle(out.join("dae.bundle"), &trained.model, trained.steps)?;
            write(&out.join("dae_loss.csv"), &loss_log_csv(&trained.log))?;
        }
        Command::TrainReg { common, train, data, variant, dae } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.reg = cfg.reg.with_variant(v);
            }
            apply_train_flags(&mut cfg.reg, &train)?;
            let out = prepare_out(&common, &cfg)?;
            let encoder = match dae {
                Some(p) => {
                    let (mut m, _) = load_bundle::<Dae>(p)?;
                    m.freeze();
                    Some(m)
                }
                None if cfg.reg.variant.needs_autoencoder() => {
                    return Err(usage(format!("variant {} needs --dae <bundle>", cfg.reg.variant.name())));
                }
                None => None,
            };
            let tr = records_to_samples(&load_fold(&data, Fold::Train)?);
            let va = records_to_samples(&load_fold(&data, Fold::Val)?);
            let ckpt_dir = out.clone();
            let mut save = move |step: usize, m: &Net| save_bundle(ckpt_dir.join(format!("vectorcnn.step{step}.bundle")), m, step);
            let trained = train_regnet(&tr, &va, encoder.as_ref(), &cfg.reg, Some(&mut save))?;
            report_training(cfg.reg.variant.name(), &trained);
            save_bundle(out.join("vectorcnn.bundle"), &trained.model, trained.steps)?;
            write(&out.join("reg_loss.csv"), &loss_log_csv(&trained.log))?;
        }
        Command::Register { common, model, source, target, mask } => {
            let cfg = load_config(&common)?;
            let out = prepare_out(&common, &cfg)?;
            let (net, _) = load_bundle::<Net>(model)?;
            let (src, tgt) = (load_image(source)?, load_image(target)?);
            let field = net.predict_field(&src, &tgt)?;
            let warped = warp_tensor(&src.to_tensor::<f32>(), &field)?;
            save_image_pgm(out.join("warped.pgm"), &acreg::image::Image::from_tensor(&warped, 0)?)?;
            save_field_pfm(&out, &field)?;
            let mut c = Container { header: vec![("kind".into(), "deformation-field".into())], arrays: Vec::new() };
            c.push_array("field", field.tensor());
            c.save(out.join("field.container"))?;
            if let Some(m) = mask {
                let m = load_mask(m, NUM_CLASSES)?;
                let soft = warp_onehot_tensor(&m.to_onehot::<f32>(NUM_CLASSES)?, &field)?;
                save_mask_pgm(out.join("warped_mask.pgm"), &hard_labels(&soft, 0)?)?;
            }
            eprintln!("mean displacement {:.3} px", field.mean_magnitude());
        }
        Command::Evaluate { common, pairs, model, spacing, fold } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = spacing {
                cfg.apps.spacing = s;
            }
            cfg.validate()?;
            let fold: Fold = fold.parse().map_err(|_| usage(format!("--fold must be train, val or test, got '{fold}'")))?;
            let out = prepare_out(&common, &cfg)?;
            let net = model.map(|m| load_bundle::<Net>(m).map(|(n, _)| n)).transpose()?;
            let records = load_fold(&pairs, fold)?;
            if records.len() < 2 {
                return Err(Failure::Core(Error::Empty(format!("fold {fold} needs at least two images"))));
            }
            // Each image registered onto the next one in manifest order.
            let mut reports = Vec::with_capacity(records.len());
            for (i, src) in records.iter().enumerate() {
                let tgt = &records[(i + 1) % records.len()];
                let moved = match &net {
                    Some(n) => acreg::apps::propagate_labels(n, &src.image, &src.mask, &tgt.image)?,
                    None => src.mask.clone(),
                };
                reports.push(MetricReport::compute(format!("{}->{}", src.id, tgt.id), &moved, &tgt.mask, Some(cfg.apps.spacing))?);
            }
            write(&out.join("metrics.csv"), &reports_to_csv(&reports))?;
            let dsc: Vec<f64> = reports.iter().map(|r| r.mean_dsc()).collect();
            let (m, s) = acreg::metrics::mean_std(&dsc);
            eprintln!("{} pairs: mean DSC {m:.4} ({s:.4})", reports.len());
        }
        Command::Plausibility { common, dae, data, k, count } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = k {
                cfg.apps.plausibility_k = k;
            }
            let out = prepare_out(&common, &cfg)?;
            let (mut model, _) = load_bundle::<Dae>(dae)?;
            model.freeze();
            let masks: Vec<LabelMask> = Manifest::read(&data)?.load(None)?.into_iter().take(count).map(|r| r.mask).collect();
            let rows = plausibility_experiment(&masks, cfg.apps.plausibility_k, &model, cfg.seed)?;
            write(&out.join("plausibility.csv"), &plausibility_csv(&rows))?;
        }
        Command::Multiatlas { common, model, atlases, target, n_atlases } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = n_atlases {
                cfg.apps.n_atlases = n;
            }
            cfg.validate()?;
            let out = prepare_out(&common, &cfg)?;
            let (net, _) = load_bundle::<Net>(model)?;
            let atlases: Vec<Atlas> = load_fold(&atlases, Fold::Train)?.into_iter().map(|r| Atlas { id: r.id, image: r.image, mask: r.mask }).collect();
            for t in &target {
                let image = load_image(t)?;
                let seg = multi_atlas_segment(&image, &atlases, &net, cfg.apps.n_atlases)?;
                let stem = t.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "target".into());
                save_mask_pgm(out.join(format!("{stem}_mask.pgm")), &seg)?;
            }
        }
        Command::Rca { common, model, references, predictions, threshold } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = threshold {
                cfg.apps.rca_threshold = t;
            }
            cfg.validate()?;
            let out = prepare_out(&common, &cfg)?;
            let (net, _) = load_bundle::<Net>(model)?;
            let refs: Vec<Atlas> = load_fold(&references, Fold::Train)?.into_iter().map(|r| Atlas { id: r.id, image: r.image, mask: r.mask }).collect();
            let mut rows = Vec::new();
            for r in Manifest::read(&predictions)?.load(None)? {
                rows.push((r.id.clone(), rca_estimate(&r.image, &r.mask, &refs, &net)?));
            }
            let mut text = rca_csv(&rows);
            if cfg.apps.rca_threshold != acreg::apps::RCA_ACCEPT_THRESHOLD {
                // Re-derive the acceptance column for a non-default threshold.
                text = std::iter::once("id,estimate,best_reference,accepted".to_string())
                    .chain(rows.iter().map(|(id, e)| format!("{id},{},{},{}", e.mean, e.best_reference, e.mean >= cfg.apps.rca_threshold)))
                    .collect::<Vec<_>>()
                    .join("\n")
                    + "\n";
            }
            write(&out.join("rca.csv"), &text)?;
        }
        Command::Features { common, dae, masks } => {
            let cfg = load_config(&common)?;
            let out = prepare_out(&common, &cfg)?;
            let (model, _) = load_bundle::<Dae>(dae)?;
            let records = Manifest::read(&masks)?.load(None)?;
            let m: Vec<LabelMask> = records.iter().map(|r| r.mask.clone()).collect();
            let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
            write(&out.join("features.csv"), &codes_csv(&ids, &extract_codes(&m, &model)?)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
