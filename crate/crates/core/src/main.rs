use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maskguide::config::RunConfig;
use maskguide::detect::{mean_ap, per_class_ap, read_detections, read_ground_truth};
use maskguide::error::{Error, Result};
use maskguide::image::Image;
use maskguide::mask::{binarize_image, to_ground_truth};
use maskguide::model::cam::cam;
use maskguide::model::checkpoint::Checkpoint;
use maskguide::model::train::{evaluate, metrics_csv, Trainer};
use maskguide::model::BackboneConfig;
use maskguide::synth::manifest::{write_dataset, DatasetManifest};
use maskguide::synth::netpbm::{read_image, write_image};
use maskguide::synth::{generate, Split};

#[derive(Parser)]
#[command(
    name = "maskguide",
    version,
    about = "Mask-guided attention for ultra-fine-grained leaf classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic leaf dataset with vein and contour masks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Train a classifier on the training split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the final checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        metrics: PathBuf,
        /// Continue from an earlier checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Top-1 accuracy of a checkpoint on a manifest split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "test", "all"])]
        split: String,
    },
    /// Per-class AP and mAP of region detections against ground truth.
    DetectEval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long = "ground-truth")]
        ground_truth: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Write a class activation map as a PGM heatmap.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PPM image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "class")]
        class_id: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a mask image into a normalized ground-truth attention map.
    PrepGt {
        #[arg(long)]
        mask: PathBuf,
        /// Side length of the target map.
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Optional PGM rendering of the map, scaled so its maximum is white.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Overrides for any `key=value` config setting.
#[derive(Args, Default)]
struct ConfigFlags {
    /// key=value config file; flags below take precedence.
    #[arg(long = "config")]
    file: Option<PathBuf>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    samples_per_class: Option<String>,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    jitter: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    pool: Option<String>,
    #[arg(long)]
    hook: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    lr_decay: Option<String>,
    #[arg(long)]
    lr_period: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    crop: Option<String>,
    #[arg(long)]
    flip: Option<String>,
    /// Ablation preset: baseline, vein, contour or full.
    #[arg(long)]
    mode: Option<String>,
}

impl ConfigFlags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("classes", &self.classes),
            ("samples_per_class", &self.samples_per_class),
            ("size", &self.size),
            ("seed", &self.seed),
            ("epsilon", &self.epsilon),
            ("jitter", &self.jitter),
            ("channels", &self.channels),
            ("kernel", &self.kernel),
            ("pool", &self.pool),
            ("hook", &self.hook),
            ("lr", &self.lr),
            ("momentum", &self.momentum),
            ("lr_decay", &self.lr_decay),
            ("lr_period", &self.lr_period),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("delta", &self.delta),
            ("lambda", &self.lambda),
            ("mu", &self.mu),
            ("crop", &self.crop),
            ("flip", &self.flip),
            ("mode", &self.mode),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }

    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(file) = &self.file {
            config.apply_file(file)?;
        }
        for (k, v) in self.pairs() {
            config.set(k, v)?;
        }
        Ok(config)
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Image(_) | Error::Checkpoint(_) => 3,
        Error::NonFinite(_) => 4,
        Error::Shape { .. }
        | Error::Annotation(_)
        | Error::Config(_)
        | Error::Parse { .. }
        | Error::EmptyDataset(_) => 2,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn cmd_synth(out: &Path, flags: &ConfigFlags) -> Result<()> {
    let config = flags.load()?.resolve()?;
    let samples = generate(&config.synth)?;
    let manifest = write_dataset(&samples, out)?;
    println!("samples={} manifest={}", samples.len(), manifest.display());
    Ok(())
}

fn cmd_train(
    manifest: &Path,
    checkpoint: &Path,
    metrics: &Path,
    resume: Option<&Path>,
    flags: &ConfigFlags,
) -> Result<()> {
    let mut config = flags.load()?;
    let manifest = DatasetManifest::load(manifest)?;
    manifest.check_balanced_split()?;
    if !config.is_set("classes") {
        let k = manifest.class_count().to_string();
        config.set("classes", &k)?;
    }
    let config = config.resolve()?;
    let samples = manifest.load_samples()?;
    if let Some(bad) = samples
        .iter()
        .find(|s| s.class_id >= config.backbone.classes)
    {
        return Err(Error::Config(format!(
            "manifest class id {} outside [0, {})",
            bad.class_id, config.backbone.classes
        )));
    }
    let train_set: Vec<_> = samples
        .into_iter()
        .filter(|s| s.split == Split::Train)
        .collect();
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if config.is_set("epochs") {
                t.config.epochs = config.train.epochs;
            }
            t
        }
        None => Trainer::new(
            BackboneConfig {
                ..config.backbone.clone()
            },
            config.train.clone(),
        )?,
    };
    let rows = trainer.train(&train_set)?;
    write_file(metrics, metrics_csv(&rows))?;
    trainer.checkpoint().save(checkpoint)?;
    if let Some(last) = rows.last() {
        println!(
            "epochs={} loss={:.6} train_acc={:.6}",
            trainer.epoch, last.losses.total, last.train_acc
        );
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, manifest: &Path, split: &str) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let blend = ckpt.blend()?;
    let samples = DatasetManifest::load(manifest)?.load_samples()?;
    let chosen: Vec<_> = match split {
        "all" => samples,
        s => {
            let want: Split = s.parse()?;
            samples.into_iter().filter(|x| x.split == want).collect()
        }
    };
    if let Some(bad) = chosen.iter().find(|s| s.class_id >= model.config.classes) {
        return Err(Error::Config(format!(
            "sample class {} outside the model's {} classes",
            bad.class_id, model.config.classes
        )));
    }
    println!("top1={:.6}", evaluate(&model, blend, &chosen)?);
    Ok(())
}

fn cmd_detect_eval(detections: &Path, ground_truth: &Path, iou: f64) -> Result<()> {
    let dets = read_detections(detections)?;
    let gts = read_ground_truth(ground_truth)?;
    let per_class = per_class_ap(&dets, &gts, iou)?;
    let mut aps = BTreeMap::new();
    for (class, r) in &per_class {
        if let Some(w) = r.warning {
            eprintln!("warning: class {class}: {w:?}");
        }
        println!("ap_{class}={:.6}", r.ap);
        aps.insert(*class, r.ap);
    }
    println!("map={:.6}", mean_ap(&aps)?);
    Ok(())
}

fn cmd_cam(checkpoint: &Path, image: &Path, class_id: usize, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let blend = ckpt.blend()?;
    let img = read_image(image)?;
    if img.channels != 3 {
        return Err(Error::Config(format!(
            "{} must be an RGB (P6) image",
            image.display()
        )));
    }
    let s = model.config.input_size;
    let img = img.resize_bilinear(s, s);
    let heat = cam(&model, blend, &img.to_tensor(), class_id)?;
    write_image(out, &heat)
}

fn cmd_prep_gt(mask: &Path, size: usize, threshold: f64, out: Option<&Path>) -> Result<()> {
    let binary = binarize_image(&read_image(mask)?, threshold)?;
    let gt = to_ground_truth(&binary, size, size)?;
    if gt.is_degenerate() {
        eprintln!("warning: empty mask, using uniform map");
    }
    for row in gt.values().chunks(size) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        println!("{}", cells.join(" "));
    }
    if let Some(out) = out {
        let peak = gt.values().iter().copied().fold(0.0, f64::max);
        let data = gt.values().iter().map(|v| v / peak).collect();
        write_image(out, &Image::new(size, size, 1, data)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, config } => cmd_synth(&out, &config),
        Command::Train {
            manifest,
            checkpoint,
            metrics,
            resume,
            config,
        } => cmd_train(&manifest, &checkpoint, &metrics, resume.as_deref(), &config),
        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => cmd_eval(&checkpoint, &manifest, &split),
        Command::DetectEval {
            detections,
            ground_truth,
            iou,
        } => cmd_detect_eval(&detections, &ground_truth, iou),
        Command::Cam {
            checkpoint,
            image,
            class_id,
            out,
        } => cmd_cam(&checkpoint, &image, class_id, &out),
        Command::PrepGt {
            mask,
            size,
            threshold,
            out,
        } => cmd_prep_gt(&mask, size, threshold, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
