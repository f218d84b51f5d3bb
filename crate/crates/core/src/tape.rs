//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation appends one node holding its output value and enough saved
//! state to compute input adjoints. [`Tape::backward`] walks the record from
//! the loss node back to the first node, visiting each operation once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Channel reduction used by the attention heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Mean,
    /// Per-pixel maximum value across channels.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Pool {
        input: Var,
        mode: PoolMode,
        window: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    ChannelReduce {
        input: Var,
        mode: ReduceMode,
        argmax: Vec<usize>,
    },
    ConcatChannels(Vec<Var>),
    SpatialSoftmax(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BroadcastMul {
        map: Var,
        features: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a tensor treated as constant during backward.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient computed by the most recent [`Tape::backward`], if the node
    /// was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("non-square kernel {kh}×{kw}"),
            ));
        }
        if self.value(bias).len() != cout {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias has {} entries, expected {cout}",
                    self.value(bias).len()
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "padded input {}×{} smaller than kernel {kh}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            ));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::new(&[n, cout, geom.ho, geom.wo], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn pool2d(
        &mut self,
        input: Var,
        mode: PoolMode,
        window: usize,
        stride: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("pool2d")?;
        if window == 0 || stride == 0 {
            return Err(Error::shape("pool2d", "window and stride must be positive"));
        }
        if h < window || w < window {
            return Err(Error::shape(
                "pool2d",
                format!("input {h}×{w} smaller than window {window}"),
            ));
        }
        if window == stride && (h % stride != 0 || w % stride != 0) {
            return Err(Error::shape(
                "pool2d",
                format!("input {h}×{w} not divisible by pooling stride {stride}"),
            ));
        }
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax.reserve(out.len());
        }
        let inv = 1.0 / (window * window) as f64;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = plane * ho * wo + oy * wo + ox;
                    match mode {
                        PoolMode::Avg => {
                            let mut s = 0.0;
                            for dy in 0..window {
                                let row = base + (oy * stride + dy) * w + ox * stride;
                                s += x[row..row + window].iter().sum::<f64>();
                            }
                            out[o] = s * inv;
                        }
                        PoolMode::Max => {
                            let mut best = base + oy * stride * w + ox * stride;
                            for dy in 0..window {
                                let row = base + (oy * stride + dy) * w + ox * stride;
                                for idx in row..row + window {
                                    if x[idx] > x[best] {
                                        best = idx;
                                    }
                                }
                            }
                            out[o] = x[best];
                            argmax.push(best);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            Op::Pool {
                input,
                mode,
                window,
                stride,
                argmax,
            },
            rg,
        ))
    }

    pub fn channel_reduce(&mut self, input: Var, mode: ReduceMode) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("channel_reduce")?;
        if c == 0 {
            return Err(Error::shape("channel_reduce", "input has zero channels"));
        }
        let x = self.value(input).data();
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        let mut argmax = Vec::new();
        for b in 0..n {
            let dst = &mut out[b * hw..(b + 1) * hw];
            let sample = &x[b * c * hw..(b + 1) * c * hw];
            match mode {
                ReduceMode::Mean => {
                    for ch in sample.chunks_exact(hw) {
                        for (d, &v) in dst.iter_mut().zip(ch) {
                            *d += v;
                        }
                    }
                    for d in dst.iter_mut() {
                        *d /= c as f64;
                    }
                }
                ReduceMode::Max => {
                    let mut best = vec![0usize; hw];
                    dst.copy_from_slice(&sample[..hw]);
                    for ch in 1..c {
                        let plane = &sample[ch * hw..(ch + 1) * hw];
                        for p in 0..hw {
                            if plane[p] > dst[p] {
                                dst[p] = plane[p];
                                best[p] = ch;
                            }
                        }
                    }
                    argmax.extend(best);
                }
            }
        }
        let value = Tensor::new(&[n, 1, h, w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            Op::ChannelReduce {
                input,
                mode,
                argmax,
            },
            rg,
        ))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "nothing to concatenate"))?;
        let (n, _, h, w) = self.value(*first).dims4("concat_channels")?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("operand {pn}×{pc}×{ph}×{pw} incompatible with N={n}, {h}×{w}"),
                ));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Softmax taken jointly over all `H×W` locations of each `(n, c)` plane.
    pub fn spatial_softmax(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("spatial_softmax")?;
        let hw = h * w;
        let mut out = self.value(input).data().to_vec();
        for plane in out.chunks_exact_mut(hw) {
            let m = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in plane.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in plane.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::SpatialSoftmax(input), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Multiplies an `N×1×H×W` map into every channel of `N×C×H×W` features.
    pub fn broadcast_mul(&mut self, map: Var, features: Var) -> Result<Var> {
        let (mn, mc, mh, mw) = self.value(map).dims4("broadcast_mul")?;
        let (n, c, h, w) = self.value(features).dims4("broadcast_mul")?;
        if mc != 1 || (mn, mh, mw) != (n, h, w) {
            return Err(Error::shape(
                "broadcast_mul",
                format!("map {mn}×{mc}×{mh}×{mw} cannot broadcast over {n}×{c}×{h}×{w}"),
            ));
        }
        let hw = h * w;
        let m = self.value(map).data();
        let f = self.value(features).data();
        let mut out = Vec::with_capacity(f.len());
        for b in 0..n {
            let mp = &m[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let fp = &f[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                out.extend(fp.iter().zip(mp).map(|(x, y)| x * y));
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.any_grad(&[map, features]);
        Ok(self.push(value, Op::BroadcastMul { map, features }, rg))
    }

    /// `N×C×H×W` to `N×C` by spatial averaging.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("global_avg_pool")?;
        let hw = (h * w) as f64;
        let data = self
            .value(input)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    /// `y = x·Wᵀ + b` with `x: N×F`, `W: K×F`, `b: K`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, f) = match *self.value(input).shape() {
            [n, f] => (n, f),
            ref s => {
                return Err(Error::shape(
                    "linear",
                    format!("input shape {s:?} is not N×F"),
                ))
            }
        };
        let (k, wf) = match *self.value(weight).shape() {
            [k, wf] => (k, wf),
            ref s => {
                return Err(Error::shape(
                    "linear",
                    format!("weight shape {s:?} is not K×F"),
                ))
            }
        };
        if wf != f || self.value(bias).len() != k {
            return Err(Error::shape(
                "linear",
                format!(
                    "input features {f}, weight {k}×{wf}, bias {}",
                    self.value(bias).len()
                ),
            ));
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bs = self.value(bias).data();
        let mut out = Vec::with_capacity(n * k);
        for row in x.chunks_exact(f) {
            for (j, wrow) in wt.chunks_exact(f).enumerate() {
                out.push(bs[j] + row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let value = Tensor::new(&[n, k], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.value(logits).shape() {
            [n, k] => (n, k),
            ref s => {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("logits shape {s:?} is not N×K"),
                ))
            }
        };
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "cross_entropy",
                format!("label {bad} outside [0, {k})"),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0;
        for (row, &label) in z.chunks_exact(k).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + s.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Per-sample `(1/|plane|)·Σ (target − pred)²`, averaged over the batch.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let n = p.shape().first().copied().unwrap_or(1).max(1);
        let plane = p.len() / n;
        let mut total = 0.0;
        for (ps, ts) in p
            .data()
            .chunks_exact(plane)
            .zip(target.data().chunks_exact(plane))
        {
            let s: f64 = ps.iter().zip(ts).map(|(a, b)| (b - a) * (b - a)).sum();
            total += s / plane as f64;
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.any_grad(&[pred]);
        Ok(self.push(value, Op::Mse { pred, target }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sum(input), rg)
    }

    /// Populates gradients of every node that `loss` depends on.
    ///
    /// Gradients from any previous call are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|d| Tensor::new(node.value.shape(), d).expect("gradient shape")))
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let x = self.value(input);
                let wt = self.value(weight);
                let (n, cin, h, w) = x.dims4("conv2d").expect("checked in forward");
                let (cout, _, k, _) = wt.dims4("conv2d").expect("checked in forward");
                let (_, _, ho, wo) = node.value.dims4("conv2d").expect("rank 4");
                let geom = ConvGeom {
                    n,
                    cin,
                    h,
                    w,
                    cout,
                    k,
                    stride,
                    pad,
                    ho,
                    wo,
                };
                if self.wants(bias) {
                    let gb = slot(grads, bias, cout);
                    for b in 0..n {
                        for (o, acc) in gb.iter_mut().enumerate() {
                            let plane = &g[(b * cout + o) * ho * wo..(b * cout + o + 1) * ho * wo];
                            *acc += plane.iter().sum::<f64>();
                        }
                    }
                }
                let mut gx = self.wants(input).then(|| vec![0.0; x.len()]);
                let mut gw = self.wants(weight).then(|| vec![0.0; wt.len()]);
                kernels::conv_backward(
                    x.data(),
                    wt.data(),
                    g,
                    &geom,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    add_into(slot(grads, input, x.len()), &gx);
                }
                if let Some(gw) = gw {
                    add_into(slot(grads, weight, wt.len()), &gw);
                }
            }
            &Op::Relu(input) => {
                if self.wants(input) {
                    let x = self.value(input).data();
                    let gx = slot(grads, input, x.len());
                    for ((d, &xv), &gv) in gx.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Pool {
                input,
                mode,
                window,
                stride,
                argmax,
            } => {
                let input = *input;
                if !self.wants(input) {
                    return;
                }
                let x = self.value(input);
                let (_, _, h, w) = x.dims4("pool2d").expect("rank 4");
                let (n, c, ho, wo) = node.value.dims4("pool2d").expect("rank 4");
                let gx = slot(grads, input, x.len());
                match mode {
                    PoolMode::Max => {
                        for (&src, &gv) in argmax.iter().zip(g) {
                            gx[src] += gv;
                        }
                    }
                    PoolMode::Avg => {
                        let inv = 1.0 / (window * window) as f64;
                        for plane in 0..n * c {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let gv = g[plane * ho * wo + oy * wo + ox] * inv;
                                    for dy in 0..*window {
                                        let row =
                                            plane * h * w + (oy * stride + dy) * w + ox * stride;
                                        for d in &mut gx[row..row + window] {
                                            *d += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ChannelReduce {
                input,
                mode,
                argmax,
            } => {
                let input = *input;
                if !self.wants(input) {
                    return;
                }
                let x = self.value(input);
                let (n, c, h, w) = x.dims4("channel_reduce").expect("rank 4");
                let hw = h * w;
                let gx = slot(grads, input, x.len());
                for b in 0..n {
                    let gp = &g[b * hw..(b + 1) * hw];
                    match mode {
                        ReduceMode::Mean => {
                            let inv = 1.0 / c as f64;
                            for ch in 0..c {
                                let dst = &mut gx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                                for (d, &gv) in dst.iter_mut().zip(gp) {
                                    *d += gv * inv;
                                }
                            }
                        }
                        ReduceMode::Max => {
                            for p in 0..hw {
                                let ch = argmax[b * hw + p];
                                gx[(b * c + ch) * hw + p] += gp[p];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let (n, total_c, h, w) = node.value.dims4("concat_channels").expect("rank 4");
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.wants(p) {
                        let len = self.value(p).len();
                        let gp = slot(grads, p, len);
                        for b in 0..n {
                            let src =
                                &g[(b * total_c + offset) * hw..(b * total_c + offset + pc) * hw];
                            add_into(&mut gp[b * pc * hw..(b + 1) * pc * hw], src);
                        }
                    }
                    offset += pc;
                }
            }
            &Op::SpatialSoftmax(input) => {
                if !self.wants(input) {
                    return;
                }
                let (_, _, h, w) = node.value.dims4("spatial_softmax").expect("rank 4");
                let hw = h * w;
                let y = node.value.data();
                let gx = slot(grads, input, y.len());
                for ((yp, gp), dp) in y
                    .chunks_exact(hw)
                    .zip(g.chunks_exact(hw))
                    .zip(gx.chunks_exact_mut(hw))
                {
                    let dot: f64 = yp.iter().zip(gp).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dp.iter_mut().zip(yp).zip(gp) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let other = self.value(b).data();
                    let ga = slot(grads, a, g.len());
                    for ((d, &gv), &o) in ga.iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
                if self.wants(b) {
                    let other = self.value(a).data();
                    let gb = slot(grads, b, g.len());
                    for ((d, &gv), &o) in gb.iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
            }
            &Op::Scale(a, factor) => {
                if self.wants(a) {
                    let ga = slot(grads, a, g.len());
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
            &Op::BroadcastMul { map, features } => {
                let (n, c, h, w) = node.value.dims4("broadcast_mul").expect("rank 4");
                let hw = h * w;
                if self.wants(map) {
                    let f = self.value(features).data();
                    let gm = slot(grads, map, n * hw);
                    for b in 0..n {
                        let dst = &mut gm[b * hw..(b + 1) * hw];
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for p in 0..hw {
                                dst[p] += g[off + p] * f[off + p];
                            }
                        }
                    }
                }
                if self.wants(features) {
                    let m = self.value(map).data();
                    let gf = slot(grads, features, n * c * hw);
                    for b in 0..n {
                        let mp = &m[b * hw..(b + 1) * hw];
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for p in 0..hw {
                                gf[off + p] += g[off + p] * mp[p];
                            }
                        }
                    }
                }
            }
            &Op::GlobalAvgPool(input) => {
                if !self.wants(input) {
                    return;
                }
                let x = self.value(input);
                let (_, _, h, w) = x.dims4("global_avg_pool").expect("rank 4");
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                let gx = slot(grads, input, x.len());
                for (dp, &gv) in gx.chunks_exact_mut(hw).zip(g) {
                    for d in dp {
                        *d += gv * inv;
                    }
                }
            }
            &Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(input).data();
                let wt = self.value(weight).data();
                let (n, f) = (self.value(input).shape()[0], self.value(input).shape()[1]);
                let k = self.value(weight).shape()[0];
                if self.wants(bias) {
                    let gb = slot(grads, bias, k);
                    for row in g.chunks_exact(k) {
                        add_into(gb, row);
                    }
                }
                if self.wants(weight) {
                    let gw = slot(grads, weight, k * f);
                    for b in 0..n {
                        let xr = &x[b * f..(b + 1) * f];
                        for j in 0..k {
                            let gv = g[b * k + j];
                            for (d, &xv) in gw[j * f..(j + 1) * f].iter_mut().zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
                if self.wants(input) {
                    let gx = slot(grads, input, n * f);
                    for b in 0..n {
                        let dst = &mut gx[b * f..(b + 1) * f];
                        for j in 0..k {
                            let gv = g[b * k + j];
                            for (d, &wv) in dst.iter_mut().zip(&wt[j * f..(j + 1) * f]) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                if !self.wants(logits) {
                    return;
                }
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let gz = slot(grads, logits, n * k);
                for (b, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        gz[b * k + j] += scale * (probs[b * k + j] - onehot);
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pred = *pred;
                if !self.wants(pred) {
                    return;
                }
                let p = self.value(pred).data();
                let scale = 2.0 * g[0] / p.len() as f64;
                let gp = slot(grads, pred, p.len());
                for ((d, &pv), &tv) in gp.iter_mut().zip(p).zip(target.data()) {
                    *d += scale * (pv - tv);
                }
            }
            &Op::Sum(input) => {
                if self.wants(input) {
                    let len = self.value(input).len();
                    for d in slot(grads, input, len) {
                        *d += g[0];
                    }
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Direct convolution loops. The innermost loop always runs over a
/// contiguous output row so the stride-1 case vectorizes.
mod kernels {
    use super::ConvGeom;

    /// Output columns `ox` with `0 <= ox*stride + kx - pad < w`.
    fn valid_cols(kx: usize, g: &ConvGeom) -> (usize, usize) {
        let lo = if g.pad > kx {
            (g.pad - kx).div_ceil(g.stride)
        } else {
            0
        };
        let hi = if g.w + g.pad > kx {
            ((g.w - 1 + g.pad - kx) / g.stride + 1).min(g.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn input_row(oy: usize, ky: usize, g: &ConvGeom) -> Option<usize> {
        let iy = (oy * g.stride + ky).checked_sub(g.pad)?;
        (iy < g.h).then_some(iy)
    }

    pub fn conv_forward(x: &[f64], wt: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
        let mut out = vec![0.0; g.n * g.cout * ohw];
        for b in 0..g.n {
            for o in 0..g.cout {
                let out_plane = &mut out[(b * g.cout + o) * ohw..(b * g.cout + o + 1) * ohw];
                out_plane.fill(bias[o]);
                for c in 0..g.cin {
                    let in_plane = &x[(b * g.cin + c) * hw..(b * g.cin + c + 1) * hw];
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let wv = wt[((o * g.cin + c) * g.k + ky) * g.k + kx];
                            let (lo, hi) = valid_cols(kx, g);
                            for oy in 0..g.ho {
                                let Some(iy) = input_row(oy, ky, g) else {
                                    continue;
                                };
                                let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                                let out_row = &mut out_plane[oy * g.wo + lo..oy * g.wo + hi];
                                if g.stride == 1 {
                                    let ix0 = lo + kx - g.pad;
                                    for (ov, iv) in out_row.iter_mut().zip(&in_row[ix0..]) {
                                        *ov += wv * iv;
                                    }
                                } else {
                                    for (j, ov) in out_row.iter_mut().enumerate() {
                                        *ov += wv * in_row[(lo + j) * g.stride + kx - g.pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn conv_backward(
        x: &[f64],
        wt: &[f64],
        gout: &[f64],
        g: &ConvGeom,
        mut gx: Option<&mut [f64]>,
        mut gw: Option<&mut [f64]>,
    ) {
        let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
        for b in 0..g.n {
            for o in 0..g.cout {
                let g_plane = &gout[(b * g.cout + o) * ohw..(b * g.cout + o + 1) * ohw];
                for c in 0..g.cin {
                    let in_off = (b * g.cin + c) * hw;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let widx = ((o * g.cin + c) * g.k + ky) * g.k + kx;
                            let wv = wt[widx];
                            let (lo, hi) = valid_cols(kx, g);
                            let mut wacc = 0.0;
                            for oy in 0..g.ho {
                                let Some(iy) = input_row(oy, ky, g) else {
                                    continue;
                                };
                                let g_row = &g_plane[oy * g.wo + lo..oy * g.wo + hi];
                                let row_off = in_off + iy * g.w;
                                if g.stride == 1 {
                                    let ix0 = row_off + lo + kx - g.pad;
                                    if gw.is_some() {
                                        wacc += g_row
                                            .iter()
                                            .zip(&x[ix0..ix0 + g_row.len()])
                                            .map(|(a, b)| a * b)
                                            .sum::<f64>();
                                    }
                                    if let Some(gx) = gx.as_deref_mut() {
                                        for (d, gv) in
                                            gx[ix0..ix0 + g_row.len()].iter_mut().zip(g_row)
                                        {
                                            *d += wv * gv;
                                        }
                                    }
                                } else {
                                    for (j, &gv) in g_row.iter().enumerate() {
                                        let ix = row_off + (lo + j) * g.stride + kx - g.pad;
                                        wacc += gv * x[ix];
                                        if let Some(gx) = gx.as_deref_mut() {
                                            gx[ix] += wv * gv;
                                        }
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_deref_mut() {
                                gw[widx] += wacc;
                            }
                        }
                    }
                }
            }
        }
    }
}
