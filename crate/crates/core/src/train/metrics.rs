//! Per-epoch metrics, weight histograms and run logs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Model;

use super::TrainConfig;

pub const SCHEMA_VERSION: &str = "1.0";

/// Quantizer state of one stage in natural units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSnapshot {
    pub q: f64,
    pub s: f64,
    pub alpha: f64,
    pub beta: f64,
    pub weight_bits: u8,
    pub act_bits: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub h_w_bits_per_weight: Option<f64>,
    pub h_x_bits_per_activation: Option<f64>,
    pub huffman_w_bits: Option<f64>,
    pub huffman_x_bits: Option<f64>,
    pub huffman_w_bits_with_overhead: Option<f64>,
    /// Coded weight payload in bytes (`Σ payload bits / 8`).
    pub huffman_w_bytes: Option<f64>,
    pub objective: f64,
    pub lr_factor: f64,
    pub quant: Vec<QuantSnapshot>,
}

/// Row layout of `metrics.csv`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CsvRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    #[serde(rename = "H_w_bits_per_weight")]
    pub h_w: Option<f64>,
    #[serde(rename = "H_x_bits_per_activation")]
    pub h_x: Option<f64>,
    pub huffman_w_bits: Option<f64>,
    pub huffman_x_bits: Option<f64>,
    pub objective: f64,
}

impl From<&EpochMetrics> for CsvRow {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            train_loss: m.train_loss,
            test_acc: m.test_acc,
            h_w: m.h_w_bits_per_weight,
            h_x: m.h_x_bits_per_activation,
            huffman_w_bits: m.huffman_w_bits,
            huffman_x_bits: m.huffman_x_bits,
            objective: m.objective,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochHistogram {
    /// Zero for the initial weights.
    pub epoch: usize,
    pub layers: Vec<LayerHistogram>,
}

/// Histogram over `bins` equal cells of `[lo, hi]`; outliers land in the
/// edge cells so counts always sum to `values.len()`.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> LayerHistogram {
    let mut counts = vec![0u64; bins.max(1)];
    let width = (hi - lo) / counts.len() as f64;
    for &v in values {
        let b = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
        let b = if b.is_nan() { 0 } else { b.clamp(0.0, (counts.len() - 1) as f64) as usize };
        counts[b] += 1;
    }
    LayerHistogram { lo, hi, counts }
}

/// Master-weight histograms with one cell per grid level (rounding cells),
/// or `2^fallback_bits` cells over the value range for unquantized layers.
pub fn weight_histograms(model: &Model, epoch: usize, fallback_bits: u8) -> EpochHistogram {
    let layers = model
        .weighted_layers()
        .map(|layer| {
            let w = layer.weights.data();
            match layer.quant.as_ref().and_then(|qp| qp.weight_grid().ok()) {
                Some(g) => {
                    let half = 0.5 * g.step();
                    histogram(w, g.min_level() - half, g.max_level() + half, g.len())
                }
                None => {
                    let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    histogram(w, lo, hi, 1 << fallback_bits)
                }
            }
        })
        .collect();
    EpochHistogram { epoch, layers }
}

/// Everything `train` writes to `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
    pub histograms: Vec<EpochHistogram>,
    pub warnings: Vec<String>,
}

impl RunLog {
    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        check_schema(&v)?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

/// Rejects documents whose schema major version is not ours.
pub fn check_schema(v: &serde_json::Value) -> Result<()> {
    let found = v
        .get("schema_version")
        .and_then(|s| s.as_str())
        .ok_or_else(|| Error::Format("missing schema_version".into()))?;
    let major = |s: &str| s.split('.').next().unwrap_or("").to_string();
    if major(found) != major(SCHEMA_VERSION) {
        return Err(Error::Format(format!(
            "schema version {found} is not compatible with {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

pub fn write_csv(path: &Path, epochs: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in epochs {
        w.serialize(CsvRow::from(m))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::util::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_conserves_counts() {
        let h = histogram(&[-5.0, -0.9, 0.0, 0.49, 0.51, 7.0, f64::NAN], -1.0, 1.0, 4);
        assert_eq!(h.counts, vec![3, 0, 2, 2]);
        assert_eq!(h.counts.iter().sum::<u64>(), 7);
    }

    #[test]
    fn schema_major_is_enforced() {
        assert!(check_schema(&serde_json::json!({"schema_version": "1.3"})).is_ok());
        assert!(check_schema(&serde_json::json!({"schema_version": "2.0"})).is_err());
        assert!(check_schema(&serde_json::json!({})).is_err());
    }
}
