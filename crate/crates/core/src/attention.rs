//! Dual-head spatial attention, attention-weighted feature blending and the
//! composite training loss.
//!
//! A head reduces the hooked feature map across channels by max and by mean,
//! mixes the two single-channel maps with a 1×1 convolution and normalizes the
//! result with a softmax over all spatial positions. Two heads (vein and
//! contour) reweight the features, which are then blended with the original:
//!
//! `F = α·M + β·(A_vein ⊙ M) + γ·(A_con ⊙ M)`, with `α + β + γ = 1`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{ReduceMode, Tape, Var};
use crate::tensor::Tensor;

/// Trainable 1×1 convolution over the stacked `(max, mean)` channel maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    /// `1×2×1×1`; index 0 weighs the max map, index 1 the mean map.
    pub weight: Tensor,
    /// Length 1.
    pub bias: Tensor,
}

impl AttentionHead {
    pub fn new(w_max: f64, w_mean: f64, bias: f64) -> Self {
        Self {
            weight: Tensor::new(&[1, 2, 1, 1], vec![w_max, w_mean]).expect("static shape"),
            bias: Tensor::new(&[1], vec![bias]).expect("static shape"),
        }
    }

    /// Weights uniform in `[-0.5, 0.5]`, zero bias.
    pub fn init(rng: &mut impl Rng) -> Self {
        Self::new(rng.gen_range(-0.5..=0.5), rng.gen_range(-0.5..=0.5), 0.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl HeadVars {
    pub fn register(tape: &mut Tape, head: &AttentionHead) -> Self {
        Self {
            weight: tape.param(head.weight.clone()),
            bias: tape.param(head.bias.clone()),
        }
    }
}

/// `softmax(conv1x1(max_c M | mean_c M))`, one distribution per sample.
pub fn compute_attention(tape: &mut Tape, m_img: Var, head: HeadVars) -> Result<Var> {
    let max = tape.channel_reduce(m_img, ReduceMode::Max)?;
    let mean = tape.channel_reduce(m_img, ReduceMode::Mean)?;
    let stacked = tape.concat_channels(&[max, mean])?;
    let logits = tape.conv2d(stacked, head.weight, head.bias, 1, 0)?;
    tape.spatial_softmax(logits)
}

/// Tape-free evaluation of [`compute_attention`].
pub fn attention_map(m_img: &Tensor, head: &AttentionHead) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(m_img.clone());
    let vars = HeadVars {
        weight: tape.constant(head.weight.clone()),
        bias: tape.constant(head.bias.clone()),
    };
    let a = compute_attention(&mut tape, x, vars)?;
    Ok(tape.value(a).clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendWeights {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl BlendWeights {
    pub const DEFAULT: BlendWeights = BlendWeights {
        alpha: 0.3,
        beta: 0.5,
        gamma: 0.2,
    };

    pub const IDENTITY: BlendWeights = BlendWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if ![alpha, beta, gamma]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            return Err(Error::Config(format!(
                "blend weights must be non-negative, got alpha={alpha} beta={beta} gamma={gamma}"
            )));
        }
        if (alpha + beta + gamma - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "blend weights must sum to 1, got alpha+beta+gamma={}",
                alpha + beta + gamma
            )));
        }
        Ok(Self { alpha, beta, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// True when both attention terms are switched off.
    pub fn is_identity(&self) -> bool {
        self.beta == 0.0 && self.gamma == 0.0
    }
}

impl Default for BlendWeights {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub delta: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl LossWeights {
    pub const DEFAULT: LossWeights = LossWeights {
        delta: 0.1,
        lambda: 0.1,
        mu: 1.0,
    };

    pub fn new(delta: f64, lambda: f64, mu: f64) -> Result<Self> {
        if ![delta, lambda, mu]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got delta={delta} lambda={lambda} mu={mu}"
            )));
        }
        if delta == 0.0 && lambda == 0.0 && mu == 0.0 {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(Self { delta, lambda, mu })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub vein: f64,
    pub con: f64,
    pub total: f64,
}

/// `α·M + β·(vein ⊙ M) + γ·(con ⊙ M)`. Zero-weight terms are not evaluated,
/// so `α = 1` returns `M` unchanged.
pub fn blend(tape: &mut Tape, m_img: Var, vein: Var, con: Var, w: BlendWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    let mut push = |tape: &mut Tape, term: Var| -> Result<()> {
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
        Ok(())
    };
    if w.alpha != 0.0 {
        let t = if w.alpha == 1.0 {
            m_img
        } else {
            tape.scale(m_img, w.alpha)
        };
        push(tape, t)?;
    }
    for (map, weight) in [(vein, w.beta), (con, w.gamma)] {
        if weight != 0.0 {
            let weighted = tape.broadcast_mul(map, m_img)?;
            let t = tape.scale(weighted, weight);
            push(tape, t)?;
        }
    }
    Ok(acc.expect("blend weights sum to one"))
}

/// Tape-free evaluation of [`blend`].
pub fn blend_tensors(
    m_img: &Tensor,
    vein: &Tensor,
    con: &Tensor,
    w: BlendWeights,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let m = tape.constant(m_img.clone());
    let v = tape.constant(vein.clone());
    let c = tape.constant(con.clone());
    let out = blend(&mut tape, m, v, c, w)?;
    Ok(tape.value(out).clone())
}

/// Mean over the batch of `(1/(H·W))·Σ (gt − fea)²` over the full grid.
pub fn mse_loss(tape: &mut Tape, m_fea: Var, m_gt: Tensor) -> Result<Var> {
    let (n, c, h, w) = tape.value(m_fea).dims4("mse_loss")?;
    let (gn, gc, gh, gw) = m_gt.dims4("mse_loss")?;
    if (n, c, h, w) != (gn, gc, gh, gw) {
        return Err(Error::shape(
            "mse_loss",
            format!("attention map {n}×{c}×{h}×{w} vs ground truth {gn}×{gc}×{gh}×{gw}"),
        ));
    }
    tape.mse(m_fea, m_gt)
}

/// `δ·L_vein + λ·L_con + μ·L_ce` on plain numbers.
pub fn total_loss(l_vein: f64, l_con: f64, l_ce: f64, w: LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [
        ("vein", l_vein),
        ("contour", l_con),
        ("cross-entropy", l_ce),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::NonFinite(format!(
                "{name} loss {v} must be finite and non-negative"
            )));
        }
    }
    Ok(LossBreakdown {
        ce: l_ce,
        vein: l_vein,
        con: l_con,
        total: w.delta * l_vein + w.lambda * l_con + w.mu * l_ce,
    })
}

/// Tape version of [`total_loss`]; zero-weight terms are skipped.
pub fn weighted_loss(
    tape: &mut Tape,
    l_vein: Option<Var>,
    l_con: Option<Var>,
    l_ce: Var,
    w: LossWeights,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (term, weight) in [(Some(l_ce), w.mu), (l_vein, w.delta), (l_con, w.lambda)] {
        let Some(term) = term else { continue };
        if weight == 0.0 {
            continue;
        }
        let t = if weight == 1.0 {
            term
        } else {
            tape.scale(term, weight)
        };
        acc = Some(match acc {
            Some(prev) => tape.add(prev, t)?,
            None => t,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.scale(l_ce, 0.0)))
}
