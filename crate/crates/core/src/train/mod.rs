//! Joint SGD over master weights and quantizer parameters.
//!
//! Each mini-batch: quantize the weights once, run every sample forward with
//! its own activation draws, accumulate the proxy gradients, add the entropy
//! penalty gradients, then take one momentum step on all five parameter
//! groups. Quantizer parameters live in log space; their gradients are
//! chained through `exp` before the update.

mod config;
pub mod metrics;

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::data::Dataset;
use crate::entropy::ActivationStats;
use crate::error::{Error, Result};
use crate::net::{arch, checkpoint, ForwardTrace, GradAccumulator, Gradients, LayerQuantParams, Model, Mode};

pub use config::{Arch, PenaltyScale, TrainConfig};
pub use metrics::{EpochHistogram, EpochMetrics, QuantSnapshot, RunLog, SCHEMA_VERSION};

const EVAL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const CODEC_SALT: u64 = 0xc2b2_ae3d_27d4_eb4f;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Q,
    S,
    Alpha,
    Beta,
}

/// Per-layer rate: `η_q/√(|w|·2^(b_w−1))`, `η_s/√(|x|·2^b_x)`,
/// `η_α/√|w|`, `η_β/√|x|`; weights use the base rate unchanged.
pub fn scaled_lr(kind: ParamKind, base: f64, n_weights: usize, n_acts: usize, weight_bits: u8, act_bits: u8) -> f64 {
    let w = n_weights.max(1) as f64;
    let x = n_acts.max(1) as f64;
    match kind {
        ParamKind::Weight => base,
        ParamKind::Q => base / (w * 2f64.powi(weight_bits as i32 - 1)).sqrt(),
        ParamKind::S => base / (x * 2f64.powi(act_bits as i32)).sqrt(),
        ParamKind::Alpha => base / w.sqrt(),
        ParamKind::Beta => base / x.sqrt(),
    }
}

/// `2·mean|v| / √(2^(b−1))`, or `1/2^(b−1)` when every value is zero.
pub fn initial_step(values: &[f64], bits: u8) -> Option<f64> {
    let mean = values.iter().map(|v| v.abs()).sum::<f64>() / values.len().max(1) as f64;
    let half = 2f64.powi(bits as i32 - 1);
    (mean > 0.0 && mean.is_finite()).then(|| 2.0 * mean / half.sqrt())
}

fn fallback_step(bits: u8) -> f64 {
    2f64.powi(1 - bits as i32)
}

/// Sets every stage's quantizer from its weights and from the activations
/// produced by `batch` in full precision. Returns warnings for degenerate
/// layers.
pub fn init_quant_params(
    model: &mut Model,
    batch: &[&[f64]],
    bits: u8,
    exempt_first_last: bool,
    alpha0: f64,
    beta0: f64,
) -> Result<Vec<String>> {
    if batch.is_empty() {
        return Err(Error::Empty("initialization batch"));
    }
    let n_stages = model.num_stages();
    let widths = model.act_widths().to_vec();
    let mut act_abs = vec![0.0; widths.len()];
    let snap = model.quantize_weights(Mode::Fp, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for x in batch {
        let t = model.forward(&snap, x, 0, &mut rng)?;
        for (a, act) in t.acts.iter().enumerate() {
            act_abs[a] += act.raw.iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    let mut warnings = Vec::new();
    for l in 0..n_stages {
        let exempt = exempt_first_last && (l == 0 || l + 1 == n_stages);
        let wb = if exempt { 8 } else { bits };
        let q = initial_step(model.stage(l).weights.data(), wb).unwrap_or_else(|| {
            let msg = format!("stage {l}: all weights zero, using step {}", fallback_step(wb));
            warn!("{msg}");
            warnings.push(msg);
            fallback_step(wb)
        });
        let s = if l < widths.len() {
            let mean = act_abs[l] / (widths[l] * batch.len()) as f64;
            if mean > 0.0 && mean.is_finite() {
                2.0 * mean / 2f64.powi(bits as i32 - 1).sqrt()
            } else {
                let msg = format!("stage {l}: all activations zero, using step {}", fallback_step(bits));
                warn!("{msg}");
                warnings.push(msg);
                fallback_step(bits)
            }
        } else {
            1.0
        };
        let layer = model.stage_mut(l);
        layer.quant = Some(LayerQuantParams::new(q, s, alpha0, beta0, wb, bits)?);
        layer.exempt_8bit = exempt;
    }
    Ok(warnings)
}

/// Builds the network described by the config for `data`.
pub fn build_model(cfg: &TrainConfig, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<Model> {
    let kinds = match cfg.arch {
        Arch::Cnn => {
            if data.input_len != 784 || data.classes != 10 {
                return Err(Error::Config("the cnn architecture needs 28×28 inputs and 10 classes".into()));
            }
            arch::mnist_cnn()
        }
        Arch::Mlp => {
            let mut sizes = vec![data.input_len];
            sizes.extend(&cfg.mlp_hidden);
            sizes.push(data.classes);
            arch::mlp(&sizes)
        }
    };
    Model::init(data.input_len, &kinds, cfg.act_topk(), rng)
}

/// Result of one mini-batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    /// Mean cross-entropy.
    pub loss: f64,
    /// Mean `Σ_l H(x_l)` over samples (0 in FP mode).
    pub act_bits: f64,
    /// `H(w)` when λ > 0, else 0.
    pub weight_bits: f64,
    /// `loss + γ·act_bits + λ·weight_bits`.
    pub objective: f64,
    pub correct: usize,
    pub grads: Gradients,
}

/// Forward/backward over one mini-batch with a fresh weight quantization.
pub fn batch_gradients(
    model: &Model,
    mode: Mode,
    batch: &[(&[f64], usize)],
    gamma: f64,
    lambda: f64,
    rng: &mut ChaCha8Rng,
    on_trace: &mut dyn FnMut(&ForwardTrace) -> Result<()>,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(Error::Empty("mini-batch"));
    }
    let snap = model.quantize_weights(mode, rng)?;
    let mut acc = GradAccumulator::new(model);
    let (mut loss, mut act_bits, mut correct) = (0.0, 0.0, 0);
    for &(x, y) in batch {
        let trace = model.forward(&snap, x, y, rng)?;
        model.accumulate_backward(&snap, &trace, gamma, &mut acc)?;
        loss += trace.loss;
        act_bits += trace.activation_bits();
        correct += (trace.predicted() == y) as usize;
        on_trace(&trace)?;
    }
    let n = batch.len() as f64;
    let mut grads = acc.finish(&snap, 1.0 / n);
    let mut weight_bits = 0.0;
    if lambda > 0.0 && mode != Mode::Fp {
        let (bits, gw) = model.weight_entropy_grads()?;
        weight_bits = bits;
        grads.add_scaled(&gw, lambda);
    }
    let (loss, act_bits) = (loss / n, act_bits / n);
    Ok(BatchOutcome {
        loss,
        act_bits,
        weight_bits,
        objective: loss + gamma * act_bits + lambda * weight_bits,
        correct,
        grads,
    })
}

/// Position in the training loop handed to observers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepContext {
    /// Zero-based.
    pub epoch: usize,
    /// Mini-batches completed before this one, over the whole run.
    pub step: u64,
    pub batch_len: usize,
    /// Last mini-batch of the epoch.
    pub epoch_end: bool,
}

/// Hooks invoked synchronously from the training loop.
pub trait Observer {
    fn on_forward(&mut self, _ctx: &StepContext, _model: &Model, _trace: &ForwardTrace) -> Result<()> {
        Ok(())
    }

    /// Called after each parameter update; may rewrite the weights.
    fn after_update(&mut self, _ctx: &StepContext, _model: &mut Model) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _model: &Model) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

#[derive(Clone, Debug, Default)]
struct Velocity {
    w: Vec<f64>,
    log_q: f64,
    log_s: f64,
    log_alpha: f64,
    log_beta: f64,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    velocity: Vec<Velocity>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed mini-batches.
    pub step: u64,
    pub history: Vec<EpochMetrics>,
    pub histograms: Vec<EpochHistogram>,
    pub warnings: Vec<String>,
    /// Checkpoint bytes captured when a non-finite value aborted training.
    pub abort_snapshot: Option<Vec<u8>>,
    rng: ChaCha8Rng,
}

impl TrainState {
    /// Builds and initializes the model for `train`.
    pub fn new(config: TrainConfig, train: &Dataset) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = build_model(&config, train, &mut rng)?;
        let mut warnings = Vec::new();
        if config.mode != Mode::Fp {
            let n = config.batch_size.min(train.len());
            let batch: Vec<&[f64]> = (0..n).map(|i| train.input(i)).collect();
            warnings = init_quant_params(
                &mut model,
                &batch,
                config.bits,
                config.exempt_first_last,
                config.alpha_init,
                config.beta_init,
            )?;
        }
        Self::from_model(config, model, warnings, rng)
    }

    /// Wraps an already initialized model.
    pub fn from_model(config: TrainConfig, model: Model, warnings: Vec<String>, rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let velocity = model
            .weighted_layers()
            .map(|l| Velocity {
                w: vec![0.0; l.weights.len()],
                ..Default::default()
            })
            .collect();
        let histograms = vec![metrics::weight_histograms(&model, 0, config.bits)];
        Ok(Self {
            config,
            model,
            velocity,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            histograms,
            warnings,
            abort_snapshot: None,
            rng,
        })
    }

    fn apply_update(&mut self, grads: &Gradients, factor: f64) -> Result<()> {
        let cfg = &self.config;
        let mu = cfg.momentum;
        let widths = self.model.act_widths().to_vec();
        let quantized = cfg.mode != Mode::Fp;
        for (l, (g, v)) in grads.layers.iter().zip(&mut self.velocity).enumerate() {
            let layer = self.model.stage_mut(l);
            let n_w = layer.weights.len();
            let lr_w = cfg.lr_w * factor;
            for ((w, vw), gw) in layer.weights.data_mut().iter_mut().zip(&mut v.w).zip(&g.w) {
                *vw = mu * *vw + gw + cfg.weight_decay * *w;
                *w -= lr_w * *vw;
            }
            if !quantized {
                continue;
            }
            let qp = layer.quant.as_mut().expect("quantized modes initialize every stage");
            let n_x = widths.get(l).copied().unwrap_or(0);
            let (wb, ab) = (qp.weight_bits, qp.act_bits);
            let lr = |kind, base: f64| factor * scaled_lr(kind, base, n_w, n_x, wb, ab);
            let step = |p: &mut f64, vel: &mut f64, grad: f64, rate: f64| {
                // ∂/∂ log p = p · ∂/∂p
                *vel = mu * *vel + p.exp() * grad;
                *p -= rate * *vel;
            };
            step(&mut qp.log_q, &mut v.log_q, g.q, lr(ParamKind::Q, cfg.lr_q));
            step(&mut qp.log_alpha, &mut v.log_alpha, g.alpha, lr(ParamKind::Alpha, cfg.lr_alpha));
            if l < widths.len() {
                step(&mut qp.log_s, &mut v.log_s, g.s, lr(ParamKind::S, cfg.lr_s));
                step(&mut qp.log_beta, &mut v.log_beta, g.beta, lr(ParamKind::Beta, cfg.lr_beta));
            }
            if ![qp.log_q, qp.log_s, qp.log_alpha, qp.log_beta].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("quantizer parameters of stage {l}")));
            }
        }
        Ok(())
    }

    fn run_batches(&mut self, train: &Dataset, observer: &mut dyn Observer) -> Result<(f64, usize)> {
        let cfg = self.config.clone();
        let factor = cfg.lr_factor(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        let n_batches = order.len().div_ceil(cfg.batch_size);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = StepContext {
                epoch: self.epoch,
                step: self.step,
                batch_len: chunk.len(),
                epoch_end: b + 1 == n_batches,
            };
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (train.input(i), train.label(i))).collect();
            let model = &self.model;
            let (gamma, lambda) = cfg.penalty_weights(model);
            let out = batch_gradients(
                model,
                cfg.mode,
                &batch,
                gamma,
                lambda,
                &mut self.rng,
                &mut |t| observer.on_forward(&ctx, model, t),
            )?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {} at step {}", out.loss, self.step)));
            }
            if !out.grads.all_finite() {
                return Err(Error::NonFinite(format!("gradient at step {}", self.step)));
            }
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
            self.apply_update(&out.grads, factor)?;
            self.step += 1;
            observer.after_update(&ctx, &mut self.model)?;
        }
        Ok((loss_sum / train.len() as f64, correct))
    }

    /// One pass over `train`, then end-of-epoch metrics on `test`.
    pub fn train_epoch(&mut self, train: &Dataset, test: &Dataset, observer: &mut dyn Observer) -> Result<EpochMetrics> {
        let before = checkpoint::encode(&self.model);
        let (train_loss, correct) = match self.run_batches(train, observer) {
            Ok(v) => v,
            Err(e) => {
                self.abort_snapshot = Some(before);
                return Err(e);
            }
        };
        let mut m = self.evaluate(train, test)?;
        m.train_loss = train_loss;
        m.train_acc = correct as f64 / train.len() as f64;
        m.lr_factor = self.config.lr_factor(self.epoch);
        self.epoch += 1;
        m.epoch = self.epoch;
        info!(
            "epoch {} loss {:.4} test_acc {:.4} objective {:.4}",
            m.epoch, m.train_loss, m.test_acc, m.objective
        );
        self.history.push(m.clone());
        self.histograms
            .push(metrics::weight_histograms(&self.model, self.epoch, self.config.bits));
        observer.on_epoch_end(self.epoch, &self.model)?;
        Ok(m)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, train: &Dataset, test: &Dataset, observer: &mut dyn Observer) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.train_epoch(train, test, observer)?;
        }
        Ok(())
    }

    fn eval_rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed ^ salt)
    }

    /// Test accuracy in the run's own mode: `Q_d` for R-CDL, `Q_p` with a
    /// fixed evaluation seed for CDL.
    pub fn test_accuracy(&self, test: &Dataset) -> Result<f64> {
        accuracy(&self.model, self.config.mode, test, &mut self.eval_rng(EVAL_SALT))
    }

    /// End-of-epoch metrics (training fields left zero).
    pub fn evaluate(&self, train: &Dataset, test: &Dataset) -> Result<EpochMetrics> {
        let cfg = &self.config;
        let test_acc = self.test_accuracy(test)?;
        let probe = test.head(cfg.probe_size.max(1));
        let mut m = EpochMetrics {
            epoch: self.epoch,
            train_loss: 0.0,
            train_acc: 0.0,
            test_acc,
            h_w_bits_per_weight: None,
            h_x_bits_per_activation: None,
            huffman_w_bits: None,
            huffman_x_bits: None,
            huffman_w_bits_with_overhead: None,
            huffman_w_bytes: None,
            objective: 0.0,
            lr_factor: 1.0,
            quant: Vec::new(),
        };
        if cfg.mode == Mode::Fp {
            m.objective = probe_objective(&self.model, Mode::Fp, &probe, 0.0, 0.0, None)?;
            return Ok(m);
        }
        let mut stats = self.model.activation_stats();
        let (gamma, lambda) = cfg.penalty_weights(&self.model);
        m.objective = probe_objective(&self.model, Mode::Rcdl, &probe, gamma, lambda, Some(&mut stats))?;
        let report = self.model.entropy_report(&stats)?;
        m.h_w_bits_per_weight = Some(report.bits_per_weight());
        m.h_x_bits_per_activation = Some(report.bits_per_activation());
        if cfg.measure_huffman {
            let mut rng = self.eval_rng(CODEC_SALT);
            let cm = codec::compress_model(&self.model, cfg.bits, &mut rng)?;
            let w = cm.metrics();
            m.huffman_w_bits = Some(w.avg_bits);
            m.huffman_w_bits_with_overhead = Some(w.avg_bits_with_overhead);
            m.huffman_w_bytes = Some(w.payload_bits as f64 / 8.0);
            if !self.model.act_widths().is_empty() {
                let start = (cfg.act_batch_index * cfg.batch_size).min(train.len().saturating_sub(1));
                let end = (start + cfg.batch_size).min(train.len());
                let inputs: Vec<&[f64]> = (start..end).map(|i| train.input(i)).collect();
                m.huffman_x_bits = Some(codec::activation_bits(&self.model, &inputs, &mut rng)?.avg_bits);
            }
        }
        m.quant = quant_snapshots(&self.model);
        Ok(m)
    }

    pub fn run_log(&self) -> RunLog {
        RunLog {
            schema_version: SCHEMA_VERSION.to_string(),
            config: self.config.clone(),
            epochs: self.history.clone(),
            histograms: self.histograms.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// Writes `model.ckpt`, `metrics.csv` and `metrics.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&self.model, &dir.join("model.ckpt"))?;
        metrics::write_csv(&dir.join("metrics.csv"), &self.history)?;
        let json = serde_json::to_vec_pretty(&self.run_log())?;
        crate::util::write_atomic(&dir.join("metrics.json"), &json)
    }
}

pub fn quant_snapshots(model: &Model) -> Vec<QuantSnapshot> {
    model
        .weighted_layers()
        .filter_map(|l| l.quant)
        .map(|qp| QuantSnapshot {
            q: qp.q(),
            s: qp.s(),
            alpha: qp.alpha(),
            beta: qp.beta(),
            weight_bits: qp.weight_bits,
            act_bits: qp.act_bits,
        })
        .collect()
}

/// Fraction of `data` classified correctly with one weight quantization.
pub fn accuracy(model: &Model, mode: Mode, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let snap = model.quantize_weights(mode, rng)?;
    let mut correct = 0;
    for i in 0..data.len() {
        let t = model.forward(&snap, data.input(i), data.label(i), rng)?;
        correct += (t.predicted() == data.label(i)) as usize;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// `mean(CE + γ·Σ_l H(x_l)) + λ·H(w)` over `probe`, optionally recording
/// activation statistics.
pub fn probe_objective(
    model: &Model,
    mode: Mode,
    probe: &Dataset,
    gamma: f64,
    lambda: f64,
    mut stats: Option<&mut ActivationStats>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SALT);
    let snap = model.quantize_weights(mode, &mut rng)?;
    let mut total = 0.0;
    for i in 0..probe.len() {
        let t = model.forward(&snap, probe.input(i), probe.label(i), &mut rng)?;
        total += t.loss + gamma * t.activation_bits();
        if let Some(s) = stats.as_deref_mut() {
            model.record_activations(s, &t)?;
        }
    }
    let mut obj = total / probe.len().max(1) as f64;
    if lambda > 0.0 {
        obj += lambda * model.weight_entropy_bits()?;
    }
    Ok(obj)
}

/// One row of a λ/γ sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub lambda: f64,
    pub gamma: f64,
    pub bits: u8,
    pub seed: u64,
    pub test_acc: f64,
    pub avg_bits_per_weight: Option<f64>,
    pub avg_bits_per_activation: Option<f64>,
    pub avg_bits_per_weight_with_overhead: Option<f64>,
}

impl SweepRow {
    pub fn from_run(cfg: &TrainConfig, last: &EpochMetrics) -> Self {
        Self {
            mode: cfg.mode,
            lambda: cfg.lambda,
            gamma: cfg.gamma,
            bits: cfg.bits,
            seed: cfg.seed,
            test_acc: last.test_acc,
            avg_bits_per_weight: last.huffman_w_bits,
            avg_bits_per_activation: last.huffman_x_bits,
            avg_bits_per_weight_with_overhead: last.huffman_w_bits_with_overhead,
        }
    }
}

/// Trains every config on the same data and returns one row per run.
pub fn sweep(configs: &[TrainConfig], train: &Dataset, test: &Dataset) -> Result<Vec<SweepRow>> {
    configs
        .iter()
        .map(|cfg| {
            let mut state = TrainState::new(cfg.clone(), train)?;
            state.run(train, test, &mut ())?;
            let last = state.history.last().expect("epochs ≥ 1");
            Ok(SweepRow::from_run(cfg, last))
        })
        .collect()
}

/// Accuracy-versus-bits Pareto frontier, ascending in bits. A row stays if
/// no other row reaches at least its accuracy with fewer bits.
pub fn frontier(rows: &[SweepRow], bits: impl Fn(&SweepRow) -> Option<f64>) -> Vec<SweepRow> {
    let mut pts: Vec<(f64, &SweepRow)> = rows.iter().filter_map(|r| bits(r).map(|b| (b, r))).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.test_acc.total_cmp(&a.1.test_acc)));
    let mut out: Vec<SweepRow> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for (_, r) in pts {
        if r.test_acc > best {
            best = r.test_acc;
            out.push(r.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_clusters, ClusterSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            arch: Arch::Mlp,
            mlp_hidden: vec![8],
            epochs: 2,
            batch_size: 16,
            bits: 4,
            probe_size: 32,
            ..Default::default()
        }
    }

    fn data() -> (Dataset, Dataset) {
        gaussian_clusters(&ClusterSpec {
            train: 64,
            test: 32,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn scaled_rates() {
        assert_eq!(scaled_lr(ParamKind::Q, 0.3, 1, 1, 1, 1), 0.3);
        assert_eq!(scaled_lr(ParamKind::Q, 1.6, 64, 1, 3, 1), 0.1);
        assert_eq!(scaled_lr(ParamKind::Beta, 2.0, 1, 100, 1, 1), 0.2);
        assert_eq!(scaled_lr(ParamKind::S, 4.0, 1, 2, 1, 3), 1.0);
        assert_eq!(scaled_lr(ParamKind::Alpha, 4.0, 16, 1, 1, 1), 1.0);
    }

    #[test]
    fn initial_steps() {
        let q = initial_step(&[1.0, -1.0, 1.0], 4).unwrap();
        assert!((q - 2.0 / 8f64.sqrt()).abs() < 1e-15);
        assert!(initial_step(&[0.0; 4], 4).is_none());
    }

    #[test]
    fn zero_weight_layer_falls_back_with_warning() {
        let (train, _) = data();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = build_model(&tiny_cfg(), &train, &mut rng).unwrap();
        m.stage_mut(1).weights.data_mut().fill(0.0);
        let batch: Vec<&[f64]> = (0..8).map(|i| train.input(i)).collect();
        let w = init_quant_params(&mut m, &batch, 4, false, 500.0, 500.0).unwrap();
        assert_eq!(w.len(), 1);
        assert!((m.quant(1).unwrap().q() - 0.125).abs() < 1e-15);
        for l in 0..2 {
            assert!((m.quant(l).unwrap().alpha() - 500.0).abs() < 1e-9);
            assert!((m.quant(l).unwrap().beta() - 500.0).abs() < 1e-9);
        }
    }

    #[test]
    fn exempt_layers_use_eight_bits() {
        let (train, _) = data();
        let cfg = TrainConfig {
            exempt_first_last: true,
            mlp_hidden: vec![8, 8],
            ..tiny_cfg()
        };
        let st = TrainState::new(cfg, &train).unwrap();
        let bits: Vec<u8> = (0..3).map(|l| st.model.quant(l).unwrap().weight_bits).collect();
        assert_eq!(bits, vec![8, 4, 8]);
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let (train, test) = data();
        let cfg = TrainConfig {
            lr_w: 0.0,
            lr_q: 0.0,
            lr_s: 0.0,
            lr_alpha: 0.0,
            lr_beta: 0.0,
            weight_decay: 0.0,
            lambda: 0.05,
            gamma: 0.05,
            ..tiny_cfg()
        };
        let mut st = TrainState::new(cfg, &train).unwrap();
        let before = st.model.clone();
        st.train_epoch(&train, &test, &mut ()).unwrap();
        assert_eq!(st.model, before);
        assert_eq!((st.epoch, st.step), (1, 4));
        assert_eq!(st.history.len(), 1);
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let (train, test) = data();
        for mode in [Mode::Cdl, Mode::Rcdl] {
            let cfg = TrainConfig {
                mode,
                lambda: 0.01,
                gamma: 0.01,
                ..tiny_cfg()
            };
            let run = || {
                let mut st = TrainState::new(cfg.clone(), &train).unwrap();
                st.run(&train, &test, &mut ()).unwrap();
                (checkpoint::encode(&st.model), st.history)
            };
            let (a, ha) = run();
            let (b, hb) = run();
            assert_eq!(a, b);
            assert_eq!(ha, hb);
        }
    }

    #[test]
    fn blowup_aborts_with_snapshot() {
        let (train, test) = data();
        let cfg = TrainConfig {
            lr_w: 1e200,
            ..tiny_cfg()
        };
        let mut st = TrainState::new(cfg, &train).unwrap();
        let err = st.run(&train, &test, &mut ()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        let snap = checkpoint::decode(st.abort_snapshot.as_ref().unwrap()).unwrap();
        assert_eq!(snap.num_stages(), 2);
    }

    #[test]
    fn frontier_keeps_undominated_rows() {
        let row = |bits: f64, acc: f64| SweepRow {
            mode: Mode::Rcdl,
            lambda: 0.0,
            gamma: 0.0,
            bits: 4,
            seed: 0,
            test_acc: acc,
            avg_bits_per_weight: Some(bits),
            avg_bits_per_activation: None,
            avg_bits_per_weight_with_overhead: None,
        };
        let rows = vec![row(3.0, 0.9), row(1.0, 0.8), row(2.0, 0.7), row(4.0, 0.95)];
        let f = frontier(&rows, |r| r.avg_bits_per_weight);
        let pts: Vec<(f64, f64)> = f.iter().map(|r| (r.avg_bits_per_weight.unwrap(), r.test_acc)).collect();
        assert_eq!(pts, vec![(1.0, 0.8), (3.0, 0.9), (4.0, 0.95)]);
    }
}
