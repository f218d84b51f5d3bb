//! Small convolutional classifier with the two attention heads spliced in
//! after a configurable backbone stage.
//!
//! Each stage is `conv k×k (same padding) → relu → max-pool`. The output of
//! stage `hook` is the feature map the heads attend over; the blended map
//! continues through the remaining stages, a global average pool and a
//! linear layer.

pub mod cam;
pub mod checkpoint;
pub mod train;

use rand::Rng;

use crate::attention::{
    blend, compute_attention, mse_loss, weighted_loss, AttentionHead, BlendWeights, HeadVars,
    LossBreakdown, LossWeights,
};
use crate::error::{Error, Result};
use crate::tape::{PoolMode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    /// Zero-based index of the stage whose output feeds the attention heads.
    pub hook: usize,
    pub input_size: usize,
    pub classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            kernel: 3,
            pool: 2,
            hook: 1,
            input_size: 64,
            classes: 20,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "stage channels must be non-empty and positive, got {:?}",
                self.channels
            )));
        }
        if self.hook >= self.channels.len() {
            return Err(Error::Config(format!(
                "hook stage {} out of range for {} stages",
                self.hook,
                self.channels.len()
            )));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size {} must be odd",
                self.kernel
            )));
        }
        if self.pool == 0 {
            return Err(Error::Config("pool window must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        let factor = self.pool.pow(self.channels.len() as u32);
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by cumulative pooling factor {factor}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Side length of the hooked feature map.
    pub fn hook_size(&self) -> usize {
        self.input_size / self.pool.pow(self.hook as u32 + 1)
    }

    pub fn final_size(&self) -> usize {
        self.input_size / self.pool.pow(self.channels.len() as u32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: BackboneConfig,
    pub stages: Vec<ConvParams>,
    pub vein_head: AttentionHead,
    pub contour_head: AttentionHead,
    /// `K×C_last`.
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

/// Node handles for one forward pass.
#[derive(Clone, Debug)]
pub struct Graph {
    /// In [`Model::param_names`] order.
    pub params: Vec<Var>,
    pub m_img: Var,
    pub vein: Option<Var>,
    pub contour: Option<Var>,
    pub features: Var,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub vein: Option<Var>,
    pub contour: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub vein: Tensor,
    pub contour: Tensor,
    pub losses: LossBreakdown,
}

impl Model {
    /// Conv weights He-uniform, heads uniform in `[-0.5, 0.5]`, classifier
    /// uniform in `[-0.1, 0.1]`; all biases zero.
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut stages = Vec::with_capacity(config.channels.len());
        let mut cin = 3;
        for &cout in &config.channels {
            let bound = (6.0 / (cin * k * k) as f64).sqrt();
            let weight = Tensor::from_fn(&[cout, cin, k, k], |_| rng.gen_range(-bound..=bound));
            stages.push(ConvParams {
                weight,
                bias: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let vein_head = AttentionHead::init(rng);
        let contour_head = AttentionHead::init(rng);
        let classifier_weight =
            Tensor::from_fn(&[config.classes, cin], |_| rng.gen_range(-0.1..=0.1));
        Ok(Self {
            classifier_bias: Tensor::zeros(&[config.classes]),
            config,
            stages,
            vein_head,
            contour_head,
            classifier_weight,
        })
    }

    pub fn zero_classifier(&mut self) {
        self.classifier_weight = Tensor::zeros(self.classifier_weight.shape());
        self.classifier_bias = Tensor::zeros(self.classifier_bias.shape());
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.stages.len() {
            names.push(format!("backbone.{i}.weight"));
            names.push(format!("backbone.{i}.bias"));
        }
        for head in ["vein", "contour"] {
            names.push(format!("head.{head}.weight"));
            names.push(format!("head.{head}.bias"));
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.push(&s.weight);
            out.push(&s.bias);
        }
        for h in [&self.vein_head, &self.contour_head] {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out.push(&self.classifier_weight);
        out.push(&self.classifier_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        for h in [&mut self.vein_head, &mut self.contour_head] {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4("forward")?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(
                "forward",
                format!("expected N×3×{s}×{s} images, got {:?}", images.shape()),
            ));
        }
        Ok(())
    }

    /// Records the forward pass. With `attention == false` the heads are not
    /// evaluated and the hooked features pass through untouched.
    pub fn build(
        &self,
        tape: &mut Tape,
        images: Tensor,
        blend_w: BlendWeights,
        attention: bool,
    ) -> Result<Graph> {
        self.check_images(&images)?;
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect();
        let n_stages = self.stages.len();
        let head_base = 2 * n_stages;
        let vein_vars = HeadVars {
            weight: params[head_base],
            bias: params[head_base + 1],
        };
        let contour_vars = HeadVars {
            weight: params[head_base + 2],
            bias: params[head_base + 3],
        };
        let mut x = tape.constant(standardize(&images)?);
        let mut m_img = x;
        let mut vein = None;
        let mut contour = None;
        for i in 0..n_stages {
            let conv = tape.conv2d(
                x,
                params[2 * i],
                params[2 * i + 1],
                1,
                self.config.kernel / 2,
            )?;
            let act = tape.relu(conv);
            x = if self.config.pool > 1 {
                tape.pool2d(act, PoolMode::Max, self.config.pool, self.config.pool)?
            } else {
                act
            };
            if i == self.config.hook {
                m_img = x;
                if attention {
                    let v = compute_attention(tape, x, vein_vars)?;
                    let c = compute_attention(tape, x, contour_vars)?;
                    x = blend(tape, x, v, c, blend_w)?;
                    vein = Some(v);
                    contour = Some(c);
                }
            }
        }
        let pooled = tape.global_avg_pool(x)?;
        let logits = tape.linear(pooled, params[head_base + 4], params[head_base + 5])?;
        Ok(Graph {
            params,
            m_img,
            vein,
            contour,
            features: x,
            logits,
        })
    }

    /// Appends cross-entropy and, when ground truths are given, the attention
    /// losses.
    pub fn attach_loss(
        &self,
        tape: &mut Tape,
        graph: &Graph,
        labels: &[usize],
        targets: Option<(Tensor, Tensor)>,
        loss_w: LossWeights,
    ) -> Result<LossVars> {
        let ce = tape.cross_entropy(graph.logits, labels)?;
        let (mut lv, mut lc) = (None, None);
        if let (Some((gt_vein, gt_con)), Some(v), Some(c)) = (targets, graph.vein, graph.contour) {
            lv = Some(mse_loss(tape, v, gt_vein)?);
            lc = Some(mse_loss(tape, c, gt_con)?);
        }
        let total = weighted_loss(tape, lv, lc, ce, loss_w)?;
        Ok(LossVars {
            total,
            ce,
            vein: lv,
            contour: lc,
        })
    }

    pub fn breakdown(tape: &Tape, loss: &LossVars) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossBreakdown {
            ce: tape.value(loss.ce).item(),
            vein: get(loss.vein),
            con: get(loss.contour),
            total: tape.value(loss.total).item(),
        }
    }

    /// Full forward pass with losses. Without ground truths only the
    /// cross-entropy term contributes.
    pub fn forward(
        &self,
        images: &Tensor,
        labels: &[usize],
        targets: Option<(&Tensor, &Tensor)>,
        blend_w: BlendWeights,
        loss_w: LossWeights,
    ) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let graph = self.build(&mut tape, images.clone(), blend_w, true)?;
        let loss = self.attach_loss(
            &mut tape,
            &graph,
            labels,
            targets.map(|(v, c)| (v.clone(), c.clone())),
            loss_w,
        )?;
        Ok(ForwardOutput {
            logits: tape.value(graph.logits).clone(),
            vein: tape.value(graph.vein.expect("attention enabled")).clone(),
            contour: tape
                .value(graph.contour.expect("attention enabled"))
                .clone(),
            losses: Self::breakdown(&tape, &loss),
        })
    }

    pub fn logits(&self, images: &Tensor, blend_w: BlendWeights) -> Result<Tensor> {
        let mut tape = Tape::new();
        let graph = self.build(&mut tape, images.clone(), blend_w, !blend_w.is_identity())?;
        Ok(tape.value(graph.logits).clone())
    }

    /// Logits of the bare backbone with no attention branch at all.
    pub fn baseline_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let graph = self.build(&mut tape, images.clone(), BlendWeights::IDENTITY, false)?;
        Ok(tape.value(graph.logits).clone())
    }
}

/// Per-image, per-channel shift to zero mean and scale to unit variance.
/// Flat channels are only centered.
pub fn standardize(images: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = images.dims4("standardize")?;
    let mut out = images.clone();
    for plane in out.data_mut().chunks_exact_mut(h * w) {
        let n = plane.len() as f64;
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        for v in plane.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Ok(out)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
