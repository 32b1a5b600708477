use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Two strided convolutions and a dense classifier (28×28 inputs).
    Cnn,
    /// Dense ReLU network with `mlp_hidden` hidden widths.
    Mlp,
}

/// What λ and γ multiply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScale {
    /// Bits per weight and bits per activation, so λ and γ trade directly
    /// against the per-sample loss.
    #[default]
    PerSymbol,
    /// Total bits `H(w)` and per-sample `H(x)`.
    Total,
}

impl std::fmt::Display for PenaltyScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerSymbol => "per_symbol",
            Self::Total => "total",
        })
    }
}

impl std::str::FromStr for PenaltyScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_symbol" => Ok(Self::PerSymbol),
            "total" => Ok(Self::Total),
            _ => Err(Error::Config(format!("unknown penalty scale {s:?} (per_symbol, total)"))),
        }
    }
}

/// Hyperparameters of one training run. Every field has a TOML key of the
/// same name and a matching CLI flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Weight-entropy trade-off λ.
    pub lambda: f64,
    /// Activation-entropy trade-off γ.
    pub gamma: f64,
    pub penalty_scale: PenaltyScale,
    pub bits: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_w: f64,
    pub lr_q: f64,
    pub lr_s: f64,
    pub lr_alpha: f64,
    pub lr_beta: f64,
    pub momentum: f64,
    /// L2 decay on master weights only.
    pub weight_decay: f64,
    /// Fractions of `epochs` at which the rates are divided by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub seed: u64,
    /// Keep the first and last weighted layers at 8-bit weights.
    pub exempt_first_last: bool,
    pub arch: Arch,
    pub mlp_hidden: Vec<usize>,
    /// Activation CPMF truncation; 0 keeps the full grid.
    pub act_topk: usize,
    pub alpha_init: f64,
    pub beta_init: f64,
    /// Held-out samples used for the per-epoch objective.
    pub probe_size: usize,
    /// Training mini-batch (in dataset order) whose activations are coded.
    pub act_batch_index: usize,
    /// Measure Huffman-coded bits at every epoch end.
    pub measure_huffman: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Rcdl,
            lambda: 0.0,
            gamma: 0.0,
            penalty_scale: PenaltyScale::PerSymbol,
            bits: 6,
            epochs: 20,
            batch_size: 32,
            lr_w: 0.2,
            lr_q: 0.5,
            lr_s: 0.5,
            lr_alpha: 0.5,
            lr_beta: 0.5,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 10.0,
            seed: 1,
            exempt_first_last: false,
            arch: Arch::Cnn,
            mlp_hidden: vec![128],
            act_topk: 5,
            alpha_init: 500.0,
            beta_init: 500.0,
            probe_size: 256,
            act_batch_index: 0,
            measure_huffman: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a finite value ≥ 0, got {v}"));
            }
        }
        if !(1..=8).contains(&self.bits) {
            return bad(format!("bits must be in 1..=8, got {}", self.bits));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        for (name, v) in [
            ("lr_w", self.lr_w),
            ("lr_q", self.lr_q),
            ("lr_s", self.lr_s),
            ("lr_alpha", self.lr_alpha),
            ("lr_beta", self.lr_beta),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a finite value ≥ 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay >= 1.0) {
            return bad(format!("lr_decay must be ≥ 1, got {}", self.lr_decay));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr_milestones must be fractions in [0, 1]".into());
        }
        for (name, v) in [("alpha_init", self.alpha_init), ("beta_init", self.beta_init)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.mode == Mode::Fp && (self.lambda > 0.0 || self.gamma > 0.0) {
            return bad("entropy penalties need a quantized mode (cdl or rcdl)".into());
        }
        if self.arch == Arch::Mlp && self.mlp_hidden.iter().any(|&h| h == 0) {
            return bad("mlp_hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Learning-rate multiplier in effect during zero-based `epoch`.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).floor() as usize)
            .count();
        self.lr_decay.powi(-(passed as i32))
    }

    /// `(γ, λ)` as multipliers of per-sample activation bits and total
    /// weight bits.
    pub fn penalty_weights(&self, model: &crate::net::Model) -> (f64, f64) {
        match self.penalty_scale {
            PenaltyScale::Total => (self.gamma, self.lambda),
            PenaltyScale::PerSymbol => {
                let acts: usize = model.act_widths().iter().sum();
                (self.gamma / acts.max(1) as f64, self.lambda / model.num_weights().max(1) as f64)
            }
        }
    }

    pub fn act_topk(&self) -> Option<usize> {
        (self.act_topk > 0).then_some(self.act_topk)
    }
}
