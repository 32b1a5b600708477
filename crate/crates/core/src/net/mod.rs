//! Minimal network engine with full-precision, CDL and R-CDL execution.
//!
//! A model is a flat list of layers. Weighted layers (dense, conv2d) form the
//! quantization stages: stage `l` owns the weight quantizer `(q_l, α_l)` and,
//! unless it is the final stage, the activation quantizer `(s_l, β_l)` that
//! acts on the output of the ReLU following it. Logits are never quantized.
//!
//! * `Fp`: plain forward/backward over master weights.
//! * `Cdl`: weights are sampled once per mini-batch from their CPMFs, each
//!   sample's activations are sampled independently; backward multiplies the
//!   loss-side partial (taken at the sampled values) by the `Q_d` partials
//!   evaluated at the pre-quantization inputs.
//! * `Rcdl`: `Q_d` replaces `Q_p` everywhere, so the backward pass is the
//!   exact chain rule.

pub mod checkpoint;
mod layer;
mod tensor;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::entropy::{self, ActivationStats, EntropyReport, WeightPopulation};
use crate::error::{Error, Result};
use crate::quant::{ParamGrads, Window};

pub use layer::{Conv2dShape, Layer, LayerKind, LayerQuantParams, Padding};
pub use tensor::Tensor;

/// Default top-k truncation of activation CPMFs.
pub const ACT_TOPK: usize = 5;

/// Largest magnitude fed to a quantizer; squared distances stay finite.
pub const MAX_QUANT_INPUT: f64 = 1e150;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fp,
    Cdl,
    Rcdl,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Fp => "fp",
            Mode::Cdl => "cdl",
            Mode::Rcdl => "rcdl",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp" => Ok(Mode::Fp),
            "cdl" => Ok(Mode::Cdl),
            "rcdl" | "r-cdl" => Ok(Mode::Rcdl),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Numerically stable softmax cross-entropy (natural log).
pub fn loss_ce(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Stock architectures for the desk-scale tasks.
pub mod arch {
    use super::*;

    /// Fully connected ReLU network over `sizes[0]` inputs.
    pub fn mlp(sizes: &[usize]) -> Vec<LayerKind> {
        let mut kinds = Vec::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            kinds.push(LayerKind::Dense {
                inputs: pair[0],
                outputs: pair[1],
            });
            if i + 2 < sizes.len() {
                kinds.push(LayerKind::Relu);
            }
        }
        kinds
    }

    /// Two strided convolutions and a dense classifier for 28×28 images.
    pub fn mnist_cnn() -> Vec<LayerKind> {
        let c1 = Conv2dShape {
            in_channels: 1,
            out_channels: 8,
            kernel: 5,
            stride: 2,
            padding: Padding::Valid,
            in_h: 28,
            in_w: 28,
        };
        let c2 = Conv2dShape {
            in_channels: 8,
            out_channels: 16,
            kernel: 3,
            stride: 2,
            padding: Padding::Valid,
            in_h: c1.out_h(),
            in_w: c1.out_w(),
        };
        vec![
            LayerKind::Conv2d(c1),
            LayerKind::Relu,
            LayerKind::Conv2d(c2),
            LayerKind::Relu,
            LayerKind::Flatten,
            LayerKind::Dense {
                inputs: c2.out_len(),
                outputs: 10,
            },
        ]
    }
}

/// Layer-level bookkeeping derived from the layer list.
#[derive(Clone, Debug, PartialEq)]
struct Plan {
    /// Layer index of every weighted layer, in order.
    weighted: Vec<usize>,
    /// For each layer: the stage whose ReLU output it quantizes (relu layers
    /// of non-final stages only).
    act_stage: Vec<Option<usize>>,
    /// For each relu layer: the stage it follows.
    relu_stage: Vec<Option<usize>>,
    act_widths: Vec<usize>,
    classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_len: usize,
    layers: Vec<Layer>,
    act_topk: Option<usize>,
    plan: Plan,
}

fn build_plan(input_len: usize, layers: &[Layer]) -> Result<Plan> {
    let weighted: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.has_weights())
        .map(|(i, _)| i)
        .collect();
    if weighted.is_empty() {
        return Err(Error::Shape("model has no weighted layers".into()));
    }
    let last_stage = weighted.len() - 1;
    let mut act_stage = vec![None; layers.len()];
    let mut relu_stage = vec![None; layers.len()];
    let mut act_widths = Vec::new();
    let mut len = input_len;
    let mut stage: Option<usize> = None;
    let mut relu_seen = true;
    for (i, layer) in layers.iter().enumerate() {
        if layer.weights.len() != layer.kind.weight_len() {
            return Err(Error::Shape(format!(
                "layer {i} has {} weights, expected {}",
                layer.weights.len(),
                layer.kind.weight_len()
            )));
        }
        match layer.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d(_) => {
                if !relu_seen {
                    return Err(Error::Shape(format!(
                        "weighted layer {i} must be preceded by a relu"
                    )));
                }
                stage = Some(stage.map_or(0, |s| s + 1));
                relu_seen = false;
            }
            LayerKind::Relu => {
                let s = stage.ok_or_else(|| Error::Shape("relu before any weighted layer".into()))?;
                if relu_seen {
                    return Err(Error::Shape(format!("relu {i} does not follow a weighted layer")));
                }
                if s == last_stage {
                    return Err(Error::Shape("logits must not pass through a relu".into()));
                }
                relu_stage[i] = Some(s);
                act_stage[i] = Some(s);
                relu_seen = true;
            }
            LayerKind::Flatten => {}
        }
        len = layer.kind.out_len(len)?;
        if act_stage[i].is_some() {
            act_widths.push(len);
        }
    }
    Ok(Plan {
        weighted,
        act_stage,
        relu_stage,
        act_widths,
        classes: len,
    })
}

/// Effective weights for one mini-batch, with the `Q_d` partials needed to
/// chain gradients back to the master weights and quantizer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSnapshot {
    pub mode: Mode,
    pub layers: Vec<SnapshotLayer>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SnapshotLayer {
    /// Weights fed to the layer kernel.
    pub values: Vec<f64>,
    /// Sampled grid indices (CDL only).
    pub symbols: Vec<i32>,
    /// `∂Q_d/∂(w, q, α)` per weight (empty in FP mode).
    pub partials: Vec<ParamGrads>,
}

/// Quantized activation record of one stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActTrace {
    /// Post-ReLU, pre-quantization values `x_l`.
    pub raw: Vec<f64>,
    /// Values passed on to the next layer.
    pub quantized: Vec<f64>,
    /// Sampled grid indices (CDL only).
    pub symbols: Vec<i32>,
    /// `∂Q_d/∂(x, s, β)` per activation (empty in FP mode).
    pub partials: Vec<ParamGrads>,
    /// `|x_l| · H(MPMF)` of this sample's activations (0 in FP mode).
    pub bits: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub mode: Mode,
    /// Input of each weighted layer.
    pub inputs: Vec<Vec<f64>>,
    /// Linear output of each weighted layer.
    pub pre: Vec<Vec<f64>>,
    pub acts: Vec<ActTrace>,
    pub logits: Vec<f64>,
    pub label: usize,
    pub loss: f64,
}

impl ForwardTrace {
    /// `Σ_l H(x_l)` for this sample.
    pub fn activation_bits(&self) -> f64 {
        self.acts.iter().map(|a| a.bits).sum()
    }

    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &z) in self.logits.iter().enumerate() {
            if z > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Gradients of one stage with respect to its natural (not log) parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerGrads {
    pub w: Vec<f64>,
    pub q: f64,
    pub s: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros(model: &Model) -> Self {
        Self {
            layers: model
                .weighted_layers()
                .map(|l| LayerGrads {
                    w: vec![0.0; l.weights.len()],
                    ..Default::default()
                })
                .collect(),
        }
    }

    /// `self += c · other`.
    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += c * y;
            }
            a.q += c * b.q;
            a.s += c * b.s;
            a.alpha += c * b.alpha;
            a.beta += c * b.beta;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w.iter().all(|v| v.is_finite())
                && [l.q, l.s, l.alpha, l.beta].iter().all(|v| v.is_finite())
        })
    }
}

/// Running sum of per-sample gradients for one mini-batch.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    /// `∂L/∂(effective weight)`, summed over samples.
    eff: Vec<Vec<f64>>,
    s: Vec<f64>,
    beta: Vec<f64>,
    pub samples: usize,
    scratch: Vec<f64>,
}

impl GradAccumulator {
    pub fn new(model: &Model) -> Self {
        let n = model.num_stages();
        Self {
            eff: model.weighted_layers().map(|l| vec![0.0; l.weights.len()]).collect(),
            s: vec![0.0; n],
            beta: vec![0.0; n],
            samples: 0,
            scratch: Vec::new(),
        }
    }

    /// Chains the accumulated effective-weight gradients through the
    /// snapshot's `Q_d` partials and scales everything by `scale`.
    pub fn finish(self, snap: &WeightSnapshot, scale: f64) -> Gradients {
        let layers = self
            .eff
            .into_iter()
            .enumerate()
            .map(|(l, eff)| {
                let sl = &snap.layers[l];
                let mut g = LayerGrads {
                    s: scale * self.s[l],
                    beta: scale * self.beta[l],
                    ..Default::default()
                };
                if sl.partials.is_empty() {
                    g.w = eff.into_iter().map(|v| scale * v).collect();
                } else {
                    g.w = Vec::with_capacity(eff.len());
                    for (e, p) in eff.iter().zip(&sl.partials) {
                        g.w.push(scale * e * p.theta);
                        g.q += e * p.step;
                        g.alpha += e * p.sharpness;
                    }
                    g.q *= scale;
                    g.alpha *= scale;
                }
                g
            })
            .collect();
        Gradients { layers }
    }
}

impl Model {
    /// Builds a model from explicit layers, validating the layout.
    pub fn from_layers(input_len: usize, layers: Vec<Layer>, act_topk: Option<usize>) -> Result<Self> {
        if act_topk == Some(0) {
            return Err(Error::Domain("activation top-k must be at least 1".into()));
        }
        let plan = build_plan(input_len, &layers)?;
        Ok(Self {
            input_len,
            layers,
            act_topk,
            plan,
        })
    }

    /// He-normal initialization, no quantizer state yet.
    pub fn init<R: Rng + ?Sized>(
        input_len: usize,
        kinds: &[LayerKind],
        act_topk: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = kinds
            .iter()
            .map(|&kind| {
                let n = kind.weight_len();
                let weights = if n == 0 {
                    Tensor::empty()
                } else {
                    let std = (2.0 / kind.fan_in() as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let data = (0..n).map(|_| normal.sample(rng)).collect();
                    Tensor::new(weight_shape(&kind), data)?
                };
                Ok(Layer {
                    kind,
                    weights,
                    quant: None,
                    exempt_8bit: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(input_len, layers, act_topk)
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn classes(&self) -> usize {
        self.plan.classes
    }

    pub fn act_topk(&self) -> Option<usize> {
        self.act_topk
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_stages(&self) -> usize {
        self.plan.weighted.len()
    }

    /// Widths `|x_l|` of the quantized activation layers.
    pub fn act_widths(&self) -> &[usize] {
        &self.plan.act_widths
    }

    pub fn weighted_layers(&self) -> impl Iterator<Item = &Layer> {
        self.plan.weighted.iter().map(|&i| &self.layers[i])
    }

    pub fn stage(&self, l: usize) -> &Layer {
        &self.layers[self.plan.weighted[l]]
    }

    pub fn stage_mut(&mut self, l: usize) -> &mut Layer {
        let i = self.plan.weighted[l];
        &mut self.layers[i]
    }

    pub fn num_weights(&self) -> usize {
        self.weighted_layers().map(|l| l.weights.len()).sum()
    }

    pub fn quant(&self, l: usize) -> Result<&LayerQuantParams> {
        self.stage(l)
            .quant
            .as_ref()
            .ok_or_else(|| Error::Input(format!("stage {l} has no quantizer parameters")))
    }

    /// Sets identical quantizer parameters on every stage.
    pub fn set_uniform_quant(&mut self, params: LayerQuantParams) {
        for l in 0..self.num_stages() {
            self.stage_mut(l).quant = Some(params);
        }
    }

    /// Quantizes the master weights for one mini-batch.
    pub fn quantize_weights<R: Rng + ?Sized>(&self, mode: Mode, rng: &mut R) -> Result<WeightSnapshot> {
        let mut layers = Vec::with_capacity(self.num_stages());
        for (l, layer) in self.weighted_layers().enumerate() {
            let w = layer.weights.data();
            if mode == Mode::Fp {
                layers.push(SnapshotLayer {
                    values: w.to_vec(),
                    ..Default::default()
                });
                continue;
            }
            let qp = self.quant(l)?;
            let grid = qp.weight_grid()?;
            let alpha = qp.alpha();
            let mut sl = SnapshotLayer {
                values: Vec::with_capacity(w.len()),
                symbols: Vec::new(),
                partials: Vec::with_capacity(w.len()),
            };
            for &v in w {
                if !(v.abs() <= MAX_QUANT_INPUT) {
                    return Err(Error::NonFinite(format!("weight {v} in stage {l}")));
                }
                let win = Window::full(v, &grid, alpha);
                let (qd, partials) = win.qd_with_grads()?;
                if mode == Mode::Cdl {
                    let pos = win.sample_pos(rng);
                    sl.values.push(grid.level(pos));
                    sl.symbols.push(grid.index(pos));
                } else {
                    sl.values.push(qd);
                }
                sl.partials.push(partials);
            }
            layers.push(sl);
        }
        Ok(WeightSnapshot { mode, layers })
    }

    fn quantize_activations<R: Rng + ?Sized>(
        &self,
        stage: usize,
        raw: Vec<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ActTrace> {
        if mode == Mode::Fp {
            return Ok(ActTrace {
                quantized: raw.clone(),
                raw,
                ..Default::default()
            });
        }
        let qp = self.quant(stage)?;
        let grid = qp.act_grid()?;
        let beta = qp.beta();
        let mut marginal = vec![0.0; grid.len()];
        let mut tr = ActTrace {
            quantized: Vec::with_capacity(raw.len()),
            partials: Vec::with_capacity(raw.len()),
            ..Default::default()
        };
        for &v in &raw {
            if !(v <= MAX_QUANT_INPUT) {
                return Err(Error::NonFinite(format!("activation {v} in stage {stage}")));
            }
            let win = Window::new(v, &grid, beta, self.act_topk);
            for (k, &p) in win.probs.iter().enumerate() {
                marginal[win.start + k] += p;
            }
            let (qd, partials) = win.qd_with_grads()?;
            if mode == Mode::Cdl {
                let pos = win.sample_pos(rng);
                tr.quantized.push(grid.level(pos));
                tr.symbols.push(grid.index(pos));
            } else {
                tr.quantized.push(qd);
            }
            tr.partials.push(partials);
        }
        let n = raw.len() as f64;
        for m in &mut marginal {
            *m /= n;
        }
        tr.bits = n * entropy::entropy_bits(&marginal);
        tr.raw = raw;
        Ok(tr)
    }

    /// Runs one sample through the network with the snapshot's weights.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        snap: &WeightSnapshot,
        input: &[f64],
        label: usize,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        if input.len() != self.input_len {
            return Err(Error::Shape(format!(
                "model expects {} inputs, got {}",
                self.input_len,
                input.len()
            )));
        }
        if snap.layers.len() != self.num_stages() {
            return Err(Error::Shape("snapshot does not match model".into()));
        }
        let mode = snap.mode;
        let n = self.num_stages();
        let mut trace = ForwardTrace {
            mode,
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            acts: Vec::with_capacity(n.saturating_sub(1)),
            logits: Vec::new(),
            label,
            loss: 0.0,
        };
        let mut cur = input.to_vec();
        let mut stage = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Dense { .. } | LayerKind::Conv2d(_) => {
                    let mut out = Vec::new();
                    layer.kind.forward(&snap.layers[stage].values, &cur, &mut out);
                    trace.inputs.push(std::mem::replace(&mut cur, out.clone()));
                    trace.pre.push(out);
                    stage += 1;
                }
                LayerKind::Relu => {
                    let raw: Vec<f64> = cur.iter().map(|v| v.max(0.0)).collect();
                    match self.plan.act_stage[i] {
                        Some(s) => {
                            let act = self.quantize_activations(s, raw, mode, rng)?;
                            cur = act.quantized.clone();
                            trace.acts.push(act);
                        }
                        None => cur = raw,
                    }
                }
                LayerKind::Flatten => {}
            }
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        trace.loss = loss_ce(&cur, label)?;
        trace.logits = cur;
        Ok(trace)
    }

    /// Adds the gradient of `CE + γ·Σ_l H(x_l)` for one sample to `acc`.
    pub fn accumulate_backward(
        &self,
        snap: &WeightSnapshot,
        trace: &ForwardTrace,
        gamma: f64,
        acc: &mut GradAccumulator,
    ) -> Result<()> {
        if trace.mode != snap.mode {
            return Err(Error::Input(format!(
                "trace was produced in {} mode, snapshot is {}",
                trace.mode, snap.mode
            )));
        }
        let mode = trace.mode;
        let mut grad = softmax(&trace.logits);
        grad[trace.label] -= 1.0;
        let mut stage = self.num_stages();
        let mut scratch = std::mem::take(&mut acc.scratch);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            match layer.kind {
                LayerKind::Flatten => {}
                LayerKind::Relu => {
                    if let (Some(a), true) = (self.plan.act_stage[i], mode != Mode::Fp) {
                        self.backward_act_quant(a, &trace.acts[a], gamma, &mut grad, acc)?;
                    }
                    let s = self.plan.relu_stage[i].expect("relu follows a stage");
                    for (g, &p) in grad.iter_mut().zip(&trace.pre[s]) {
                        if p <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                LayerKind::Dense { .. } | LayerKind::Conv2d(_) => {
                    stage -= 1;
                    let want_input = stage > 0;
                    layer.kind.backward_weighted(
                        &snap.layers[stage].values,
                        &trace.inputs[stage],
                        &grad,
                        &mut acc.eff[stage],
                        want_input.then_some(&mut scratch),
                    );
                    if want_input {
                        std::mem::swap(&mut grad, &mut scratch);
                    }
                }
            }
        }
        acc.scratch = scratch;
        acc.samples += 1;
        Ok(())
    }

    fn backward_act_quant(
        &self,
        a: usize,
        act: &ActTrace,
        gamma: f64,
        grad: &mut [f64],
        acc: &mut GradAccumulator,
    ) -> Result<()> {
        let (mut ds, mut dbeta) = (0.0, 0.0);
        for (g, p) in grad.iter_mut().zip(&act.partials) {
            ds += *g * p.step;
            dbeta += *g * p.sharpness;
            *g *= p.theta;
        }
        if gamma > 0.0 {
            let qp = self.quant(a)?;
            let pen = entropy::entropy_penalty_gradients(
                &act.raw,
                &qp.act_grid()?,
                qp.beta(),
                self.act_topk,
            )?;
            for (g, v) in grad.iter_mut().zip(&pen.values) {
                *g += gamma * v;
            }
            ds += gamma * pen.step;
            dbeta += gamma * pen.sharpness;
        }
        acc.s[a] += ds;
        acc.beta[a] += dbeta;
        Ok(())
    }

    /// Full gradient set for a single sample.
    pub fn backward(&self, snap: &WeightSnapshot, trace: &ForwardTrace, gamma: f64) -> Result<Gradients> {
        let mut acc = GradAccumulator::new(self);
        self.accumulate_backward(snap, trace, gamma, &mut acc)?;
        Ok(acc.finish(snap, 1.0))
    }

    pub fn weight_populations(&self) -> Result<Vec<WeightPopulation<'_>>> {
        self.weighted_layers()
            .enumerate()
            .map(|(l, layer)| {
                let qp = self.quant(l)?;
                Ok(WeightPopulation {
                    values: layer.weights.data(),
                    grid: qp.weight_grid()?,
                    sharpness: qp.alpha(),
                })
            })
            .collect()
    }

    /// `H(w) = Σ_l |w_l|·H(MPMF_l)` and its gradient.
    pub fn weight_entropy_grads(&self) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros(self);
        let mut total = 0.0;
        for (l, pop) in self.weight_populations()?.into_iter().enumerate() {
            let pen = entropy::entropy_penalty_gradients(pop.values, &pop.grid, pop.sharpness, None)?;
            total += pen.bits;
            let g = &mut grads.layers[l];
            g.w = pen.values;
            g.q = pen.step;
            g.alpha = pen.sharpness;
        }
        Ok((total, grads))
    }

    /// `H(w)` alone.
    pub fn weight_entropy_bits(&self) -> Result<f64> {
        Ok(entropy::entropy_report(&self.weight_populations()?, None)?.total_weight_bits)
    }

    /// Fresh activation statistics sized for this model.
    pub fn activation_stats(&self) -> ActivationStats {
        ActivationStats::new(&self.plan.act_widths)
    }

    /// Records one sample's pre-quantization activations.
    pub fn record_activations(&self, stats: &mut ActivationStats, trace: &ForwardTrace) -> Result<()> {
        for (a, act) in trace.acts.iter().enumerate() {
            let qp = self.quant(a)?;
            stats.record(a, &act.raw, &qp.act_grid()?, qp.beta(), self.act_topk)?;
        }
        Ok(())
    }

    pub fn entropy_report(&self, acts: &ActivationStats) -> Result<EntropyReport> {
        if acts.layers.len() != self.plan.act_widths.len() {
            return Err(Error::Input(format!(
                "activation statistics cover {} layers, model has {}",
                acts.layers.len(),
                self.plan.act_widths.len()
            )));
        }
        entropy::entropy_report(&self.weight_populations()?, Some(acts))
    }
}

fn weight_shape(kind: &LayerKind) -> Vec<usize> {
    match kind {
        LayerKind::Dense { inputs, outputs } => vec![*outputs, *inputs],
        LayerKind::Conv2d(c) => vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
        _ => vec![0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    #[test]
    fn loss_ce_edges() {
        assert!((loss_ce(&[0.3; 7], 2).unwrap() - 7f64.ln()).abs() < 1e-12);
        assert!(loss_ce(&[50.0, 0.0, 0.0], 0).unwrap() < 1e-20);
        assert!(loss_ce(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let layer = Layer {
            kind: LayerKind::Dense { inputs: 3, outputs: 3 },
            weights: Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
            quant: None,
            exempt_8bit: false,
        };
        let m = Model::from_layers(3, vec![layer], None).unwrap();
        let snap = m.quantize_weights(Mode::Fp, &mut rng()).unwrap();
        let t = m.forward(&snap, &[0.5, -2.0, 3.0], 0, &mut rng()).unwrap();
        assert_eq!(t.logits, vec![0.5, -2.0, 3.0]);
    }

    #[test]
    fn layout_validation() {
        let d = |i, o| LayerKind::Dense { inputs: i, outputs: o };
        let mut r = rng();
        assert!(Model::init(4, &[d(4, 3), d(3, 2)], None, &mut r).is_err());
        assert!(Model::init(4, &[d(4, 3), LayerKind::Relu, d(3, 2), LayerKind::Relu], None, &mut r).is_err());
        assert!(Model::init(4, &[d(5, 3)], None, &mut r).is_err());
        let m = Model::init(4, &arch::mlp(&[4, 3, 2]), Some(5), &mut r).unwrap();
        assert_eq!(m.act_widths(), &[3]);
        let cnn = Model::init(784, &arch::mnist_cnn(), Some(5), &mut r).unwrap();
        assert_eq!(cnn.act_widths(), &[8 * 12 * 12, 16 * 5 * 5]);
        assert_eq!(cnn.classes(), 10);
    }

    #[test]
    fn relu_blocks_gradient_of_negative_preactivation() {
        let mut r = rng();
        let m = Model::init(3, &arch::mlp(&[3, 4, 2]), None, &mut r).unwrap();
        let snap = m.quantize_weights(Mode::Fp, &mut r).unwrap();
        let t = m.forward(&snap, &[0.3, -0.7, 1.1], 1, &mut r).unwrap();
        let mut acc = GradAccumulator::new(&m);
        m.accumulate_backward(&snap, &t, 0.0, &mut acc).unwrap();
        // Row o of the first layer only receives gradient if pre[o] > 0.
        let g = acc.finish(&snap, 1.0);
        for (o, &p) in t.pre[0].iter().enumerate() {
            if p <= 0.0 {
                assert!(g.layers[0].w[o * 3..o * 3 + 3].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let mut r = rng();
        let mut m = Model::init(3, &arch::mlp(&[3, 4, 2]), Some(5), &mut r).unwrap();
        m.set_uniform_quant(LayerQuantParams::new(0.1, 0.1, 50.0, 50.0, 4, 4).unwrap());
        let fp = m.quantize_weights(Mode::Fp, &mut r).unwrap();
        let rc = m.quantize_weights(Mode::Rcdl, &mut r).unwrap();
        let t = m.forward(&fp, &[0.1, 0.2, 0.3], 0, &mut r).unwrap();
        assert!(m.backward(&rc, &t, 0.0).is_err());
    }
}
