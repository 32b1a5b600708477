//! Marginal PMFs of randomly quantized populations and their entropies.
//!
//! The marginal of a layer is the average of its members' conditional PMFs.
//! Its Shannon entropy (base 2) approximates the per-symbol cost of entropy
//! coding that layer, so `|population| · H(marginal)` is the bit budget that
//! training penalizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{QuantGrid, Window};

/// Marginal PMF over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mpmf {
    pub grid: QuantGrid,
    pub probs: Vec<f64>,
    pub population_size: usize,
}

/// `H(p) = −Σ p log₂ p`, with `0·log 0 = 0`.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum::<f64>()
        .max(0.0)
}

pub fn shannon_entropy(mpmf: &Mpmf) -> f64 {
    entropy_bits(&mpmf.probs)
}

fn windows(values: &[f64], grid: &QuantGrid, sharpness: f64, topk: Option<usize>) -> Result<Vec<Window>> {
    if values.is_empty() {
        return Err(Error::Empty("population has no values"));
    }
    if !(sharpness.is_finite() && sharpness > 0.0) {
        return Err(Error::Domain(format!("sharpness must be positive, got {sharpness}")));
    }
    values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                Ok(Window::new(v, grid, sharpness, topk))
            } else {
                Err(Error::NonFinite(format!("population value {v}")))
            }
        })
        .collect()
}

fn average(grid: &QuantGrid, windows: &[Window]) -> Vec<f64> {
    let mut probs = vec![0.0; grid.len()];
    for w in windows {
        for (k, &p) in w.probs.iter().enumerate() {
            probs[w.start + k] += p;
        }
    }
    let n = windows.len() as f64;
    for p in &mut probs {
        *p /= n;
    }
    probs
}

/// Average of the (optionally top-k truncated) CPMFs of every value.
pub fn layer_mpmf(values: &[f64], grid: &QuantGrid, sharpness: f64, topk: Option<usize>) -> Result<Mpmf> {
    let ws = windows(values, grid, sharpness, topk)?;
    Ok(Mpmf {
        grid: *grid,
        probs: average(grid, &ws),
        population_size: values.len(),
    })
}

/// `|values| · H(MPMF)` together with its exact gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyGrads {
    pub bits: f64,
    pub values: Vec<f64>,
    pub step: f64,
    pub sharpness: f64,
}

/// Gradient of `|values| · H(MPMF)` with respect to every value, the grid
/// step and the sharpness.
///
/// With `m` the marginal and `p^k` the CPMF of value `k`,
/// `∂(n·H)/∂φ = Σ_k Σ_i (−log₂ m_i) ∂p^k_i/∂φ`; the `1/ln 2` term drops out
/// because each CPMF stays normalized.
pub fn entropy_penalty_gradients(
    values: &[f64],
    grid: &QuantGrid,
    sharpness: f64,
    topk: Option<usize>,
) -> Result<PenaltyGrads> {
    let ws = windows(values, grid, sharpness, topk)?;
    let marginal = average(grid, &ws);
    let neg_log: Vec<f64> = marginal
        .iter()
        .map(|&m| if m > 0.0 { -m.log2() } else { 0.0 })
        .collect();
    let mut out = PenaltyGrads {
        bits: values.len() as f64 * entropy_bits(&marginal),
        values: Vec::with_capacity(values.len()),
        step: 0.0,
        sharpness: 0.0,
    };
    for w in &ws {
        let g = w.weighted_grads(|pos| neg_log[pos]);
        out.values.push(g.theta);
        out.step += g.step;
        out.sharpness += g.sharpness;
    }
    Ok(out)
}

/// Per-sample activation entropies of one layer, averaged over a batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerActivationStats {
    /// Activations per sample, `|x_l|`.
    pub width: usize,
    /// Batch mean of the per-sample `H(MPMF)` in bits per activation.
    pub bits_per_symbol: f64,
    pub samples: usize,
}

/// Activation statistics for every quantized activation layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub layers: Vec<LayerActivationStats>,
}

impl ActivationStats {
    pub fn new(widths: &[usize]) -> Self {
        Self {
            layers: widths
                .iter()
                .map(|&width| LayerActivationStats {
                    width,
                    ..Default::default()
                })
                .collect(),
        }
    }

    /// Folds in one sample's activations for `layer`.
    pub fn record(
        &mut self,
        layer: usize,
        values: &[f64],
        grid: &QuantGrid,
        sharpness: f64,
        topk: Option<usize>,
    ) -> Result<()> {
        let h = shannon_entropy(&layer_mpmf(values, grid, sharpness, topk)?);
        let st = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::Input(format!("no activation layer {layer}")))?;
        if st.width != values.len() {
            return Err(Error::Shape(format!(
                "activation layer {layer} has width {}, got {}",
                st.width,
                values.len()
            )));
        }
        st.samples += 1;
        st.bits_per_symbol += (h - st.bits_per_symbol) / st.samples as f64;
        Ok(())
    }
}

/// One layer's weight population as seen by the entropy model.
#[derive(Clone, Copy, Debug)]
pub struct WeightPopulation<'a> {
    pub values: &'a [f64],
    pub grid: QuantGrid,
    pub sharpness: f64,
}

/// Entropy estimates for a whole model, in bits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub schema_version: String,
    /// `H(w_l) = |w_l| · H(MPMF_l)`.
    pub per_layer_weight_bits: Vec<f64>,
    /// `H(x_l) = |x_l| · H(MPMF_l)`, batch-averaged.
    pub per_layer_activation_bits: Vec<f64>,
    pub total_weight_bits: f64,
    pub total_activation_bits: f64,
    pub weight_entropy_per_symbol: Vec<f64>,
    pub activation_entropy_per_symbol: Vec<f64>,
    pub weight_counts: Vec<usize>,
    pub activation_counts: Vec<usize>,
}

pub const REPORT_SCHEMA_VERSION: &str = "1.0";

impl EntropyReport {
    /// `H(w) / |w|`.
    pub fn bits_per_weight(&self) -> f64 {
        let n: usize = self.weight_counts.iter().sum();
        if n == 0 {
            0.0
        } else {
            self.total_weight_bits / n as f64
        }
    }

    /// `H(x) / |x|`.
    pub fn bits_per_activation(&self) -> f64 {
        let n: usize = self.activation_counts.iter().sum();
        if n == 0 {
            0.0
        } else {
            self.total_activation_bits / n as f64
        }
    }
}

/// Builds the report from weight populations and (optionally) activation
/// statistics. Activation fields stay empty when `activations` is `None`.
pub fn entropy_report(
    weights: &[WeightPopulation<'_>],
    activations: Option<&ActivationStats>,
) -> Result<EntropyReport> {
    let mut report = EntropyReport {
        schema_version: REPORT_SCHEMA_VERSION.to_string(),
        ..Default::default()
    };
    for pop in weights {
        let h = shannon_entropy(&layer_mpmf(pop.values, &pop.grid, pop.sharpness, None)?);
        let bits = pop.values.len() as f64 * h;
        report.weight_entropy_per_symbol.push(h);
        report.per_layer_weight_bits.push(bits);
        report.weight_counts.push(pop.values.len());
        report.total_weight_bits += bits;
    }
    if let Some(stats) = activations {
        for (l, st) in stats.layers.iter().enumerate() {
            if st.samples == 0 {
                return Err(Error::Input(format!(
                    "activation layer {l} has no recorded samples"
                )));
            }
            let bits = st.width as f64 * st.bits_per_symbol;
            report.activation_entropy_per_symbol.push(st.bits_per_symbol);
            report.per_layer_activation_bits.push(bits);
            report.activation_counts.push(st.width);
            report.total_activation_bits += bits;
        }
    }
    Ok(report)
}
