//! Layer kinds and their loop-based kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{QuantGrid, Signedness};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// Geometry of a 2-D convolution over a `channels × h × w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_h: usize,
    pub in_w: usize,
}

impl Conv2dShape {
    fn out_dim(&self, input: usize) -> usize {
        match self.padding {
            Padding::Valid => (input - self.kernel) / self.stride + 1,
            Padding::Same => input.div_ceil(self.stride),
        }
    }

    fn pad_before(&self, input: usize) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::Same => {
                let out = self.out_dim(input);
                ((out - 1) * self.stride + self.kernel).saturating_sub(input) / 2
            }
        }
    }

    pub fn out_h(&self) -> usize {
        self.out_dim(self.in_h)
    }

    pub fn out_w(&self) -> usize {
        self.out_dim(self.in_w)
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel == 0
            || self.stride == 0
            || self.in_h == 0
            || self.in_w == 0
        {
            return Err(Error::Shape(format!("degenerate conv shape {self:?}")));
        }
        if self.padding == Padding::Valid && (self.kernel > self.in_h || self.kernel > self.in_w) {
            return Err(Error::Shape(format!(
                "kernel {} larger than input {}×{}",
                self.kernel, self.in_h, self.in_w
            )));
        }
        Ok(())
    }

    /// Calls `f(weight_index, input_index, output_index)` for every tap that
    /// lands inside the input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (pt, pl) = (self.pad_before(self.in_h), self.pad_before(self.in_w));
        let k = self.kernel;
        for oc in 0..self.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (oc * oh + oy) * ow + ox;
                    for ic in 0..self.in_channels {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - pt as isize;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - pl as isize;
                                if ix < 0 || ix >= self.in_w as isize {
                                    continue;
                                }
                                let wi = ((oc * self.in_channels + ic) * k + ky) * k + kx;
                                let ii = (ic * self.in_h + iy as usize) * self.in_w + ix as usize;
                                f(wi, ii, o);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    /// `out[o] = Σ_i w[o·inputs + i] · in[i]`, no bias.
    Dense { inputs: usize, outputs: usize },
    Conv2d(Conv2dShape),
    Relu,
    /// Data is stored flat, so this only marks the boundary.
    Flatten,
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d(_))
    }

    pub fn weight_len(&self) -> usize {
        match self {
            LayerKind::Dense { inputs, outputs } => inputs * outputs,
            LayerKind::Conv2d(c) => c.weight_len(),
            _ => 0,
        }
    }

    /// Output length for an input of length `input`.
    pub fn out_len(&self, input: usize) -> Result<usize> {
        match self {
            LayerKind::Dense { inputs, outputs } => {
                if *inputs != input {
                    return Err(Error::Shape(format!(
                        "dense layer expects {inputs} inputs, got {input}"
                    )));
                }
                Ok(*outputs)
            }
            LayerKind::Conv2d(c) => {
                c.validate()?;
                if c.in_len() != input {
                    return Err(Error::Shape(format!(
                        "conv layer expects {} inputs, got {input}",
                        c.in_len()
                    )));
                }
                Ok(c.out_len())
            }
            LayerKind::Relu | LayerKind::Flatten => Ok(input),
        }
    }

    /// Fan-in of one output unit, used for weight initialization.
    pub fn fan_in(&self) -> usize {
        match self {
            LayerKind::Dense { inputs, .. } => *inputs,
            LayerKind::Conv2d(c) => c.in_channels * c.kernel * c.kernel,
            _ => 0,
        }
    }

    pub(crate) fn forward(&self, w: &[f64], input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            LayerKind::Dense { inputs, outputs } => {
                out.extend((0..*outputs).map(|o| {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                }));
            }
            LayerKind::Conv2d(c) => {
                out.resize(c.out_len(), 0.0);
                c.for_each_tap(|wi, ii, o| out[o] += w[wi] * input[ii]);
            }
            LayerKind::Relu => out.extend(input.iter().map(|&v| v.max(0.0))),
            LayerKind::Flatten => out.extend_from_slice(input),
        }
    }

    /// Accumulates `∂/∂w` into `grad_w` and, when requested, writes `∂/∂input`.
    pub(crate) fn backward_weighted(
        &self,
        w: &[f64],
        input: &[f64],
        grad_out: &[f64],
        grad_w: &mut [f64],
        grad_in: Option<&mut Vec<f64>>,
    ) {
        match self {
            LayerKind::Dense { inputs, outputs } => {
                for o in 0..*outputs {
                    let g = grad_out[o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut grad_w[o * inputs..(o + 1) * inputs];
                    for (gw, x) in row.iter_mut().zip(input) {
                        *gw += g * x;
                    }
                }
                if let Some(gi) = grad_in {
                    gi.clear();
                    gi.resize(*inputs, 0.0);
                    for o in 0..*outputs {
                        let g = grad_out[o];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &w[o * inputs..(o + 1) * inputs];
                        for (d, wv) in gi.iter_mut().zip(row) {
                            *d += g * wv;
                        }
                    }
                }
            }
            LayerKind::Conv2d(c) => match grad_in {
                Some(gi) => {
                    gi.clear();
                    gi.resize(c.in_len(), 0.0);
                    c.for_each_tap(|wi, ii, o| {
                        let g = grad_out[o];
                        grad_w[wi] += g * input[ii];
                        gi[ii] += g * w[wi];
                    });
                }
                None => c.for_each_tap(|wi, ii, o| grad_w[wi] += grad_out[o] * input[ii]),
            },
            LayerKind::Relu | LayerKind::Flatten => {}
        }
    }
}

/// Trainable quantizer state of one weighted layer, stored in log space so
/// every parameter stays strictly positive under unconstrained updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantParams {
    pub log_q: f64,
    pub log_s: f64,
    pub log_alpha: f64,
    pub log_beta: f64,
    pub weight_bits: u8,
    pub act_bits: u8,
}

impl LayerQuantParams {
    pub fn new(q: f64, s: f64, alpha: f64, beta: f64, weight_bits: u8, act_bits: u8) -> Result<Self> {
        for (name, v) in [("q", q), ("s", s), ("alpha", alpha), ("beta", beta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self {
            log_q: q.ln(),
            log_s: s.ln(),
            log_alpha: alpha.ln(),
            log_beta: beta.ln(),
            weight_bits,
            act_bits,
        })
    }

    pub fn q(&self) -> f64 {
        self.log_q.exp()
    }

    pub fn s(&self) -> f64 {
        self.log_s.exp()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn weight_grid(&self) -> Result<QuantGrid> {
        QuantGrid::new(self.weight_bits, self.q(), Signedness::Signed)
    }

    pub fn act_grid(&self) -> Result<QuantGrid> {
        QuantGrid::new(self.act_bits, self.s(), Signedness::Unsigned)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    /// Full-precision master weights (empty for relu/flatten).
    pub weights: Tensor,
    pub quant: Option<LayerQuantParams>,
    /// First/last weighted layer kept at 8-bit weights.
    pub exempt_8bit: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shapes() {
        let c = Conv2dShape {
            in_channels: 1,
            out_channels: 8,
            kernel: 5,
            stride: 2,
            padding: Padding::Valid,
            in_h: 28,
            in_w: 28,
        };
        assert_eq!((c.out_h(), c.out_w()), (12, 12));
        let s = Conv2dShape {
            padding: Padding::Same,
            ..c
        };
        assert_eq!((s.out_h(), s.out_w()), (14, 14));
        assert_eq!(s.pad_before(28), 1);
    }

    #[test]
    fn conv_matches_naive_correlation() {
        let c = Conv2dShape {
            in_channels: 2,
            out_channels: 1,
            kernel: 2,
            stride: 1,
            padding: Padding::Valid,
            in_h: 3,
            in_w: 3,
        };
        let input: Vec<f64> = (0..18).map(|v| v as f64).collect();
        let w = vec![1.0, 0.0, 0.0, -1.0, 0.5, 0.5, 0.5, 0.5];
        let mut out = Vec::new();
        LayerKind::Conv2d(c).forward(&w, &input, &mut out);
        // channel 0: x[y][x] − x[y+1][x+1] = −4; channel 1: mean-of-4 × 2
        let expected: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .map(|&(y, x)| {
                let at = |ch: usize, yy: usize, xx: usize| input[ch * 9 + yy * 3 + xx];
                -4.0 + 0.5 * (at(1, y, x) + at(1, y, x + 1) + at(1, y + 1, x) + at(1, y + 1, x + 1))
            })
            .collect();
        assert_eq!(out, expected);
    }
}
