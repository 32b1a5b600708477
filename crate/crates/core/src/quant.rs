//! Scalar quantization core.
//!
//! A [`QuantGrid`] is a uniform reproduction alphabet `step × {indices}`. Given
//! a scalar `θ` and a sharpness `α > 0`, the conditional PMF over the grid is
//!
//! ```text
//! P(level_i | θ) = softmax_i( −α (θ − level_i)² )
//! ```
//!
//! The probabilistic quantizer `Q_p` draws a level from that PMF; the soft
//! deterministic quantizer `Q_d` is its conditional mean. `Q_d` is smooth in
//! `θ`, `step` and `α`, and its partials are closed-form functions of the
//! PMF moments:
//!
//! ```text
//! ∂Q_d/∂θ = 2α Var
//! ∂Q_d/∂q = (E + 2αθ Var − 2α Skew_u) / q
//! ∂Q_d/∂α = −Cov(level, (θ − level)²)
//! ```
//!
//! Two representations are provided. [`Cpmf`] carries the full `2^b`-entry
//! probability vector and backs the public scalar API. [`Window`] is the
//! hot-path form used by the network and entropy code: the softmax restricted
//! to a contiguous run of grid positions (all of them, or the `k` nearest for
//! top-k truncated PMFs), with no heap allocation for small windows.

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Largest bit-width accepted by [`QuantGrid`].
pub const MAX_BITS: u8 = 16;

/// `exp(−746)` is exactly zero in `f64`.
pub const UNDERFLOW_LOGIT: f64 = 746.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signedness {
    /// Indices `−2^(b−1) … 2^(b−1)−1` (weights).
    Signed,
    /// Indices `0 … 2^b−1` (post-ReLU activations).
    Unsigned,
}

/// Uniform reproduction alphabet: `step × [min_index, …, max_index]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    bits: u8,
    step: f64,
    signedness: Signedness,
}

impl QuantGrid {
    pub fn new(bits: u8, step: f64, signedness: Signedness) -> Result<Self> {
        if bits == 0 || bits > MAX_BITS {
            return Err(Error::Domain(format!(
                "bit-width {bits} outside 1..={MAX_BITS}"
            )));
        }
        if !step.is_finite() || step <= 0.0 {
            return Err(Error::Domain(format!("step must be positive, got {step}")));
        }
        Ok(Self {
            bits,
            step,
            signedness,
        })
    }

    pub fn signed(bits: u8, step: f64) -> Result<Self> {
        Self::new(bits, step, Signedness::Signed)
    }

    pub fn unsigned(bits: u8, step: f64) -> Result<Self> {
        Self::new(bits, step, Signedness::Unsigned)
    }

    /// Same index set, different step.
    pub fn with_step(&self, step: f64) -> Result<Self> {
        Self::new(self.bits, step, self.signedness)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn signedness(&self) -> Signedness {
        self.signedness
    }

    /// Number of levels, `2^b`.
    pub fn len(&self) -> usize {
        1usize << self.bits
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_index(&self) -> i32 {
        match self.signedness {
            Signedness::Signed => -(1i32 << (self.bits - 1)),
            Signedness::Unsigned => 0,
        }
    }

    pub fn max_index(&self) -> i32 {
        self.min_index() + self.len() as i32 - 1
    }

    /// Grid index of position `pos` (positions run `0..len`).
    #[inline]
    pub fn index(&self, pos: usize) -> i32 {
        self.min_index() + pos as i32
    }

    pub fn pos_of_index(&self, index: i32) -> Option<usize> {
        (self.min_index()..=self.max_index())
            .contains(&index)
            .then(|| (index - self.min_index()) as usize)
    }

    #[inline]
    pub fn level(&self, pos: usize) -> f64 {
        self.index(pos) as f64 * self.step
    }

    pub fn levels(&self) -> Vec<f64> {
        (0..self.len()).map(|p| self.level(p)).collect()
    }

    pub fn min_level(&self) -> f64 {
        self.level(0)
    }

    pub fn max_level(&self) -> f64 {
        self.level(self.len() - 1)
    }

    /// Position of the level closest to `theta` (clamped to the grid).
    #[inline]
    pub fn nearest_pos(&self, theta: f64) -> usize {
        let idx = (theta / self.step).round();
        let lo = self.min_index() as f64;
        let hi = self.max_index() as f64;
        (idx.clamp(lo, hi) - lo) as usize
    }

    /// Hard uniform quantizer `⌊θ⌉_q`, clamped to the grid span.
    pub fn round(&self, theta: f64) -> f64 {
        self.level(self.nearest_pos(theta))
    }
}

/// Conditional PMF over every level of a grid, given one scalar input.
#[derive(Clone, Debug, PartialEq)]
pub struct Cpmf {
    grid: QuantGrid,
    probs: Vec<f64>,
    input: f64,
    sharpness: f64,
}

impl Cpmf {
    /// Builds a CPMF from an explicit probability vector. The vector must have
    /// `2^b` nonnegative entries summing to one.
    pub fn from_parts(grid: QuantGrid, probs: Vec<f64>, input: f64, sharpness: f64) -> Result<Self> {
        if probs.len() != grid.len() {
            return Err(Error::Shape(format!(
                "cpmf has {} entries, grid has {}",
                probs.len(),
                grid.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Input("cpmf entries must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("cpmf sums to {total}, expected 1")));
        }
        Ok(Self {
            grid,
            probs,
            input,
            sharpness,
        })
    }

    pub fn grid(&self) -> &QuantGrid {
        &self.grid
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn input(&self) -> f64 {
        self.input
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }

    /// Position of the most likely level (lowest position wins ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in bits.
    pub fn entropy_bits(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.log2())
            .sum()
    }
}

/// Conditional mean, variance and unnormalized skew of `Q_p(θ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantMoments {
    pub mean: f64,
    pub var: f64,
    pub skew_u: f64,
}

fn check_theta(theta: f64) -> Result<()> {
    if theta.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("non-finite input {theta}")))
    }
}

fn check_sharpness(sharpness: f64) -> Result<()> {
    if sharpness.is_finite() && sharpness > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("sharpness must be positive, got {sharpness}")))
    }
}

/// Softmax of `−sharpness·(θ − level)²` over every grid level.
pub fn make_cpmf(theta: f64, grid: QuantGrid, sharpness: f64) -> Result<Cpmf> {
    check_theta(theta)?;
    check_sharpness(sharpness)?;
    Ok(Window::full(theta, &grid, sharpness).to_cpmf())
}

/// Draws the position of one level according to the CPMF.
pub fn sample_pos<R: Rng + ?Sized>(cpmf: &Cpmf, rng: &mut R) -> usize {
    draw(&cpmf.probs, rng)
}

/// One draw of `Q_p(θ)`: a grid level.
pub fn sample_qp<R: Rng + ?Sized>(cpmf: &Cpmf, rng: &mut R) -> f64 {
    cpmf.grid.level(sample_pos(cpmf, rng))
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn mean_level(grid: &QuantGrid, start: usize, probs: &[f64]) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| p * grid.level(start + k))
        .sum()
}

/// Moments by centred two-pass summation. `Skew_u = μ₃ + 2·mean·Var` where
/// `μ₃` is the third central moment; algebraically identical to
/// `Σx³p − (Σxp)(Σx²p)` but free of cancellation when the mass is
/// concentrated on one level.
fn central_moments(grid: &QuantGrid, start: usize, probs: &[f64]) -> Result<QuantMoments> {
    let mean = mean_level(grid, start, probs);
    let (mut var, mut mu3) = (0.0, 0.0);
    for (k, &p) in probs.iter().enumerate() {
        let c = grid.level(start + k) - mean;
        var += p * c * c;
        mu3 += p * c * c * c;
    }
    if !(var >= 0.0) {
        return Err(Error::Consistency(format!("invalid variance {var}")));
    }
    Ok(QuantMoments {
        mean,
        var,
        skew_u: mu3 + 2.0 * mean * var,
    })
}

/// `Q_d(θ) = Σ p_i · level_i`.
pub fn qd(cpmf: &Cpmf) -> f64 {
    mean_level(&cpmf.grid, 0, &cpmf.probs)
}

pub fn moments(cpmf: &Cpmf) -> Result<QuantMoments> {
    central_moments(&cpmf.grid, 0, &cpmf.probs)
}

/// `∂Q_d/∂θ = 2α·Var`, never negative.
pub fn dqd_dtheta(cpmf: &Cpmf) -> Result<f64> {
    Ok(2.0 * cpmf.sharpness * moments(cpmf)?.var)
}

/// `∂Q_d/∂q = (E + 2αθ·Var − 2α·Skew_u) / q`.
pub fn dqd_dq(cpmf: &Cpmf) -> Result<f64> {
    let q = cpmf.grid.step;
    if q <= 0.0 {
        return Err(Error::Domain(format!("step must be positive, got {q}")));
    }
    let m = moments(cpmf)?;
    Ok(lemma_dq(m, cpmf.input, cpmf.sharpness, q))
}

#[inline]
fn lemma_dq(m: QuantMoments, theta: f64, alpha: f64, q: f64) -> f64 {
    // Skew_u enters as μ₃ + 2·mean·Var; folding the Var terms keeps the
    // large cancelling products out of the sum.
    let mu3 = m.skew_u - 2.0 * m.mean * m.var;
    (m.mean + 2.0 * alpha * m.var * (theta - 2.0 * m.mean) - 2.0 * alpha * mu3) / q
}

/// `∂Q_d/∂α = −Cov(level, (θ − level)²)`.
pub fn dqd_dsharpness(cpmf: &Cpmf) -> f64 {
    neg_cov_level_sqdist(&cpmf.grid, 0, &cpmf.probs, cpmf.input)
}

fn neg_cov_level_sqdist(grid: &QuantGrid, start: usize, probs: &[f64], theta: f64) -> f64 {
    let (mut ex, mut ed2) = (0.0, 0.0);
    for (k, &p) in probs.iter().enumerate() {
        let x = grid.level(start + k);
        let d = theta - x;
        ex += p * x;
        ed2 += p * d * d;
    }
    let mut cov = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        let x = grid.level(start + k);
        let d = theta - x;
        cov += p * (x - ex) * (d * d - ed2);
    }
    -cov
}

/// Keeps the `k` most likely levels (ties go to the lower position), zeroes
/// the rest and renormalizes.
pub fn truncate_topk(cpmf: &Cpmf, k: usize) -> Result<Cpmf> {
    let n = cpmf.probs.len();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("top-k {k} outside 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        cpmf.probs[b]
            .partial_cmp(&cpmf.probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut probs = vec![0.0; n];
    let mut kept = 0.0;
    for &i in &order[..k] {
        probs[i] = cpmf.probs[i];
        kept += cpmf.probs[i];
    }
    if kept <= 0.0 {
        return Err(Error::Consistency("top-k retained no mass".into()));
    }
    for p in &mut probs {
        *p /= kept;
    }
    Ok(Cpmf {
        grid: cpmf.grid,
        probs,
        input: cpmf.input,
        sharpness: cpmf.sharpness,
    })
}

/// Gradient triple of some scalar with respect to `(θ, step, sharpness)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub theta: f64,
    pub step: f64,
    pub sharpness: f64,
}

/// Softmax CPMF restricted to the contiguous positions `start..start+len`.
///
/// With no truncation the window spans the whole grid. With top-k truncation
/// it spans the `k` nearest levels, which on a uniform grid are exactly the
/// `k` largest softmax masses.
#[derive(Clone, Debug)]
pub struct Window {
    pub start: usize,
    pub probs: SmallVec<[f64; 8]>,
    pub theta: f64,
    pub sharpness: f64,
    pub grid: QuantGrid,
}

impl Window {
    /// Whole-grid window. Inputs are assumed already validated.
    ///
    /// Levels whose logit falls more than [`UNDERFLOW_LOGIT`] below the peak
    /// would get an exactly-zero mass after exponentiation, so they are left
    /// out of the window; the resulting probabilities are identical.
    pub fn full(theta: f64, grid: &QuantGrid, sharpness: f64) -> Self {
        let n = grid.len();
        let q = grid.step();
        let near = grid.nearest_pos(theta);
        let dmin = theta - grid.level(near);
        let reach = (dmin * dmin + UNDERFLOW_LOGIT / sharpness).sqrt();
        let lo_idx = ((theta - reach) / q).floor() - grid.min_index() as f64;
        let hi_idx = ((theta + reach) / q).ceil() - grid.min_index() as f64;
        let lo = lo_idx.clamp(0.0, (n - 1) as f64) as usize;
        let hi = hi_idx.clamp(0.0, (n - 1) as f64) as usize;
        let (lo, hi) = (lo.min(near), hi.max(near));
        Self::span(theta, grid, sharpness, lo, hi - lo + 1)
    }

    /// Window over the `topk` nearest levels, or the whole grid when `None`
    /// or `topk ≥ 2^b`.
    pub fn new(theta: f64, grid: &QuantGrid, sharpness: f64, topk: Option<usize>) -> Self {
        let n = grid.len();
        let k = match topk {
            Some(k) if k < n => k.max(1),
            _ => return Self::full(theta, grid, sharpness),
        };
        let sq = |pos: usize| {
            let d = theta - grid.level(pos);
            d * d
        };
        let centre = grid.nearest_pos(theta);
        let (mut lo, mut hi) = (centre, centre);
        while hi - lo + 1 < k {
            let left = (lo > 0).then(|| sq(lo - 1));
            let right = (hi + 1 < n).then(|| sq(hi + 1));
            match (left, right) {
                (Some(l), Some(r)) if l <= r => lo -= 1,
                (Some(_), Some(_)) => hi += 1,
                (Some(_), None) => lo -= 1,
                (None, Some(_)) => hi += 1,
                (None, None) => break,
            }
        }
        Self::span(theta, grid, sharpness, lo, hi - lo + 1)
    }

    fn span(theta: f64, grid: &QuantGrid, sharpness: f64, start: usize, len: usize) -> Self {
        let mut probs: SmallVec<[f64; 8]> = SmallVec::with_capacity(len);
        let mut zmax = f64::NEG_INFINITY;
        for pos in start..start + len {
            let d = theta - grid.level(pos);
            let z = -sharpness * d * d;
            zmax = zmax.max(z);
            probs.push(z);
        }
        let mut total = 0.0;
        for z in probs.iter_mut() {
            *z = (*z - zmax).exp();
            total += *z;
        }
        for p in probs.iter_mut() {
            *p /= total;
        }
        Self {
            start,
            probs,
            theta,
            sharpness,
            grid: *grid,
        }
    }

    #[inline]
    pub fn level(&self, k: usize) -> f64 {
        self.grid.level(self.start + k)
    }

    /// Expands to a full-length CPMF (zeros outside the window).
    pub fn to_cpmf(&self) -> Cpmf {
        let mut probs = vec![0.0; self.grid.len()];
        probs[self.start..self.start + self.probs.len()].copy_from_slice(&self.probs);
        Cpmf {
            grid: self.grid,
            probs,
            input: self.theta,
            sharpness: self.sharpness,
        }
    }

    pub fn moments(&self) -> Result<QuantMoments> {
        central_moments(&self.grid, self.start, &self.probs)
    }

    pub fn qd(&self) -> f64 {
        mean_level(&self.grid, self.start, &self.probs)
    }

    /// Draws a grid position.
    pub fn sample_pos<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.start + draw(&self.probs, rng)
    }

    /// `Q_d` and its partials with respect to `(θ, step, sharpness)`.
    pub fn qd_with_grads(&self) -> Result<(f64, ParamGrads)> {
        let m = self.moments()?;
        let q = self.grid.step();
        let grads = ParamGrads {
            theta: 2.0 * self.sharpness * m.var,
            step: lemma_dq(m, self.theta, self.sharpness, q),
            sharpness: neg_cov_level_sqdist(&self.grid, self.start, &self.probs, self.theta),
        };
        Ok((m.mean, grads))
    }

    /// Gradient of `Σ_i g(pos_i)·p_i` with respect to `(θ, step, sharpness)`
    /// where `g` is held fixed. Uses `∂p_i = p_i (∂z_i − Σ_j p_j ∂z_j)` with
    /// logits `z_i = −α(θ − i·q)²`.
    pub fn weighted_grads(&self, mut g: impl FnMut(usize) -> f64) -> ParamGrads {
        let alpha = self.sharpness;
        let q = self.grid.step();
        let gv: SmallVec<[f64; 8]> = (0..self.probs.len())
            .map(|k| if self.probs[k] > 0.0 { g(self.start + k) } else { 0.0 })
            .collect();
        // Logit derivatives, all linear in d = θ − i·q or d².
        let dz = |k: usize| {
            let idx = self.grid.index(self.start + k) as f64;
            let d = self.theta - idx * q;
            (-2.0 * alpha * d, 2.0 * alpha * idx * d, -d * d)
        };
        let (mut eg, mut ez_t, mut ez_q, mut ez_a) = (0.0, 0.0, 0.0, 0.0);
        for (k, &p) in self.probs.iter().enumerate() {
            let (zt, zq, za) = dz(k);
            eg += p * gv[k];
            ez_t += p * zt;
            ez_q += p * zq;
            ez_a += p * za;
        }
        let mut out = ParamGrads::default();
        for (k, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let (zt, zq, za) = dz(k);
            let c = p * (gv[k] - eg);
            out.theta += c * (zt - ez_t);
            out.step += c * (zq - ez_q);
            out.sharpness += c * (za - ez_a);
        }
        out
    }
}
