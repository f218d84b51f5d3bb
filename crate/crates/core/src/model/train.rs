//! SGD-with-momentum training loop, step learning-rate schedule and top-1
//! evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{BlendWeights, LossBreakdown, LossWeights};
use crate::error::{Error, Result};
use crate::mask::{to_ground_truth, GroundTruthMap};
use crate::model::{argmax, BackboneConfig, Model};
use crate::synth::transform::{transform, TransformMode, TransformOptions};
use crate::synth::Sample;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Rows of the ablation table: which attention branches are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    Baseline,
    Vein,
    Contour,
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Baseline,
        AblationMode::Vein,
        AblationMode::Contour,
        AblationMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::Vein => "vein",
            AblationMode::Contour => "contour",
            AblationMode::Full => "full",
        }
    }

    /// Zeroes the blend and loss terms of disabled branches. The blend weight
    /// of a disabled branch moves onto `alpha` so the weights still sum to one.
    pub fn apply(self, blend: BlendWeights, loss: LossWeights) -> (BlendWeights, LossWeights) {
        let (a, b, g) = (blend.alpha(), blend.beta(), blend.gamma());
        let lw = |delta, lambda| LossWeights {
            delta,
            lambda,
            mu: loss.mu,
        };
        match self {
            AblationMode::Baseline => (BlendWeights::IDENTITY, lw(0.0, 0.0)),
            AblationMode::Vein => (
                BlendWeights::new(a + g, b, 0.0).expect("sums to one"),
                lw(loss.delta, 0.0),
            ),
            AblationMode::Contour => (
                BlendWeights::new(a + b, 0.0, g).expect("sums to one"),
                lw(0.0, loss.lambda),
            ),
            AblationMode::Full => (blend, loss),
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown mode {s:?} (baseline|vein|contour|full)"))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub lr_period: u32,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub blend: BlendWeights,
    pub loss: LossWeights,
    pub augment: TransformOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            momentum: 0.938,
            lr_decay: 10.0,
            lr_period: 100,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            blend: BlendWeights::DEFAULT,
            loss: LossWeights::DEFAULT,
            augment: TransformOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be non-negative",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) || self.lr_period == 0 {
            return Err(Error::Config(
                "lr decay factor and period must be positive".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// `lr / decay^⌊epoch / period⌋`.
    pub fn lr_at(&self, epoch: u32) -> f64 {
        self.lr / self.lr_decay.powi((epoch / self.lr_period) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub train_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,loss_total,loss_ce,loss_vein,loss_con,train_acc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.losses.total,
            self.losses.ce,
            self.losses.vein,
            self.losses.con,
            self.train_acc
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Classical momentum: `v ← m·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity: model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64, momentum: f64) {
        for ((p, v), g) in model
            .params_mut()
            .into_iter()
            .zip(&mut self.velocity)
            .zip(grads)
        {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

pub(crate) fn model_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Model, optimizer state and data-order RNG; everything needed to resume.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: Sgd,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) seed: u64,
    /// Completed epochs.
    pub epoch: u32,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(backbone: BackboneConfig, config: TrainConfig) -> Result<Self> {
        let model = Model::init(backbone, &mut model_rng(config.seed))?;
        Self::with_model(model, config)
    }

    pub fn with_model(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Sgd::new(&model),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            seed: config.seed,
            model,
            config,
            epoch: 0,
        })
    }

    pub fn run_epoch(&mut self, train_set: &[Sample]) -> Result<EpochMetrics> {
        if train_set.is_empty() {
            return Err(Error::EmptyDataset("training set"));
        }
        let lr = self.config.lr_at(self.epoch);
        let size = self.model.config.input_size;
        let hook = self.model.config.hook_size();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut self.rng);

        let mut sums = LossBreakdown::default();
        let mut correct = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut gt_vein = Vec::with_capacity(chunk.len());
            let mut gt_con = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = transform(
                    &train_set[i],
                    size,
                    TransformMode::Train,
                    self.config.augment,
                    &mut self.rng,
                );
                images.push(s.image.to_tensor());
                gt_vein.push(to_ground_truth(&s.vein, hook, hook)?);
                gt_con.push(to_ground_truth(&s.contour, hook, hook)?);
                labels.push(s.class_id);
            }
            let images = Tensor::stack(&images)?;
            let targets = (
                GroundTruthMap::batch(&gt_vein.iter().collect::<Vec<_>>())?,
                GroundTruthMap::batch(&gt_con.iter().collect::<Vec<_>>())?,
            );
            let mut tape = Tape::new();
            let graph = self
                .model
                .build(&mut tape, images, self.config.blend, true)?;
            let loss = self.model.attach_loss(
                &mut tape,
                &graph,
                &labels,
                Some(targets),
                self.config.loss,
            )?;
            let bd = Model::breakdown(&tape, &loss);
            if !bd.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {} at epoch {}",
                    bd.total, self.epoch
                )));
            }
            tape.backward(loss.total)?;
            let grads: Vec<Tensor> = graph
                .params
                .iter()
                .map(|&p| tape.grad_or_zeros(p))
                .collect();
            self.optimizer
                .step(&mut self.model, &grads, lr, self.config.momentum);

            let w = chunk.len() as f64;
            sums.total += bd.total * w;
            sums.ce += bd.ce * w;
            sums.vein += bd.vein * w;
            sums.con += bd.con * w;
            let logits = tape.value(graph.logits);
            let k = self.model.config.classes;
            correct += logits
                .data()
                .chunks_exact(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
        }
        let n = train_set.len() as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            lr,
            losses: LossBreakdown {
                ce: sums.ce / n,
                vein: sums.vein / n,
                con: sums.con / n,
                total: sums.total / n,
            },
            train_acc: correct as f64 / n,
        };
        self.epoch += 1;
        Ok(metrics)
    }

    /// Runs epochs until `config.epochs` have completed in total.
    pub fn train(&mut self, train_set: &[Sample]) -> Result<Vec<EpochMetrics>> {
        let mut rows = Vec::new();
        while self.epoch < self.config.epochs {
            rows.push(self.run_epoch(train_set)?);
        }
        Ok(rows)
    }
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(
    backbone: BackboneConfig,
    config: TrainConfig,
    train_set: &[Sample],
) -> Result<(Model, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(backbone, config)?;
    let rows = trainer.train(train_set)?;
    Ok((trainer.model, rows))
}

/// Predicted class per sample, in dataset order.
pub fn predict(model: &Model, blend: BlendWeights, samples: &[Sample]) -> Result<Vec<usize>> {
    const EVAL_BATCH: usize = 32;
    let size = model.config.input_size;
    let mut out = Vec::with_capacity(samples.len());
    // Test-mode transforms never draw from the generator.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<Tensor> = chunk
            .iter()
            .map(|s| {
                transform(
                    s,
                    size,
                    TransformMode::Test,
                    TransformOptions::default(),
                    &mut unused,
                )
                .image
                .to_tensor()
            })
            .collect();
        let logits = model.logits(&Tensor::stack(&images)?, blend)?;
        out.extend(logits.data().chunks_exact(model.config.classes).map(argmax));
    }
    Ok(out)
}

/// Top-1 accuracy.
pub fn evaluate(model: &Model, blend: BlendWeights, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let preds = predict(model, blend, samples)?;
    let correct = preds
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.class_id)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}
