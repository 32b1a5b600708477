//! Finite-difference verification of every analytic derivative.
//!
//! Difference quotients use Richardson-extrapolated central differences
//! against independent forward evaluations. Relative errors are measured as
//! `|a − d| / max(|a|, |d|, τ·scale)` where `scale` is the natural magnitude
//! of the derivative: deep inside a flat or a broad region the true value is
//! exponentially small and no double-precision quotient can resolve it.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::entropy;
use crate::error::{Error, Result};
use crate::net::{arch, LayerQuantParams, Model, Mode};
use crate::quant::{self, QuantGrid, Signedness};
use crate::train::batch_gradients;

/// Floor factor applied to each derivative's natural scale.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Quant,
    Entropy,
    Rcdl,
    Prop1,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Quant, Suite::Entropy, Suite::Rcdl, Suite::Prop1];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Quant => "quant",
            Suite::Entropy => "entropy",
            Suite::Rcdl => "rcdl",
            Suite::Prop1 => "prop1",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite '{s}' (quant, entropy, rcdl, prop1)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub checked: usize,
    pub max_err: f64,
    pub tol: f64,
    /// Absolute (`true`) or floored relative error.
    pub absolute: bool,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_err < self.tol
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} n={:<6} max_{}_err={:.3e} tol={:.0e} {}",
            self.name,
            self.checked,
            if self.absolute { "abs" } else { "rel" },
            self.max_err,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Options {
    pub seed: u64,
    /// Random instances for the quant/prop1 suites.
    pub instances: usize,
    /// Hidden width of the network used by the rcdl suite.
    pub hidden: usize,
    pub lambda: f64,
    pub gamma: f64,
    /// Perturbs one analytic derivative so the quant suite must fail.
    pub corrupt: bool,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            seed: 7,
            instances: 1000,
            hidden: 10,
            lambda: 0.05,
            gamma: 0.05,
            corrupt: false,
        }
    }
}

/// Floored relative error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    if analytic == numeric {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(4·D(h/2) − D(h)) / 3` with `D` the central difference.
pub fn richardson(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let mut d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    let coarse = d(h);
    let fine = d(h / 2.0);
    (4.0 * fine - coarse) / 3.0
}

/// `Σ_i p_i (i·q − c)` with `c = ic·q0` and logits taken relative to level
/// `ic`, so that both stay accurate when one level dominates.
fn shifted_qd(theta: f64, q: f64, alpha: f64, grid: &QuantGrid, ic: i32, q0: f64) -> f64 {
    let lc = ic as f64 * q;
    let z: Vec<f64> = (grid.min_index()..=grid.max_index())
        .map(|i| {
            let li = i as f64 * q;
            -alpha * (lc - li) * (2.0 * theta - li - lc)
        })
        .collect();
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut total, mut num) = (0.0, 0.0);
    for (k, i) in (grid.min_index()..=grid.max_index()).enumerate() {
        let p = (z[k] - zmax).exp();
        total += p;
        num += p * ((i - ic) as f64 * q + ic as f64 * (q - q0));
    }
    num / total
}

/// A random `(θ, grid, α)` with `b ≤ 6`, `q ∈ [1e-3, 1]`, `α ∈ [1, 1e4]`
/// (both log-uniform) and θ within two steps of the grid span.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R) -> (f64, QuantGrid, f64) {
    let bits = rng.gen_range(1..=6u8);
    let q = 10f64.powf(rng.gen_range(-3.0..0.0));
    let alpha = 10f64.powf(rng.gen_range(0.0..4.0));
    let sign = if rng.gen() { Signedness::Signed } else { Signedness::Unsigned };
    let grid = QuantGrid::new(bits, q, sign).expect("valid grid");
    let theta = rng.gen_range(grid.min_level() - 2.0 * q..grid.max_level() + 2.0 * q);
    (theta, grid, alpha)
}

fn quant_suite(opts: &Options) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..opts.instances {
        let (theta, grid, alpha) = random_instance(&mut rng);
        let q = grid.step();
        let cpmf = quant::make_cpmf(theta, grid, alpha)?;
        let mut d_theta = quant::dqd_dtheta(&cpmf)?;
        if opts.corrupt {
            d_theta *= 1.0 + 1e-3;
        }
        let d_q = quant::dqd_dq(&cpmf)?;
        let d_alpha = quant::dqd_dsharpness(&cpmf);

        let ic = grid.index(grid.nearest_pos(theta));
        let width = (1.0 / (2.0 * alpha * q)).min(q).min(1.0 / alpha.sqrt());
        let f = |t: f64, qq: f64, a: f64| shifted_qd(t, qq, a, &grid, ic, q);
        let fd_theta = richardson(&mut |t| f(t, q, alpha), theta, 1e-3 * width);
        let fd_q = richardson(&mut |qq| f(theta, qq, alpha), q, 1e-3 * width * q / (q + theta.abs()));
        let fd_alpha = richardson(&mut |a| f(theta, q, a), alpha, 1e-3 * alpha * (width / q).min(1.0));

        let alpha_scale = q.max(1.0 / (2.0 * alpha).sqrt()).powi(3);
        let errs = [
            rel_err(d_theta, fd_theta, SCALE_FLOOR),
            rel_err(d_q, fd_q, SCALE_FLOOR * 1f64.max(theta.abs() / q)),
            rel_err(d_alpha, fd_alpha, SCALE_FLOOR * alpha_scale),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(if e.is_nan() { f64::INFINITY } else { e });
        }
    }
    let line = |name: &str, max_err: f64, tol: f64| CheckLine {
        name: name.to_string(),
        checked: opts.instances,
        max_err,
        tol,
        absolute: false,
    };
    Ok(vec![
        line("quant.dtheta", worst[0], 1e-5),
        line("quant.dq", worst[1], 1e-4),
        line("quant.dalpha", worst[2], 1e-4),
    ])
}

/// Exhaustive `Σ p_i (θ − l_i)²` against `(θ − Q_d)² + Var`.
fn prop1_suite(opts: &Options) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let n = opts.instances.max(10_000);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (theta, grid, alpha) = random_instance(&mut rng);
        let levels = grid.levels();
        let z: Vec<f64> = levels.iter().map(|l| -alpha * (theta - l) * (theta - l)).collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let total: f64 = w.iter().sum();
        let lhs: f64 = w.iter().zip(&levels).map(|(p, l)| p / total * (theta - l) * (theta - l)).sum();
        let cpmf = quant::make_cpmf(theta, grid, alpha)?;
        let m = quant::moments(&cpmf)?;
        let rhs = (theta - m.mean) * (theta - m.mean) + m.var;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(vec![CheckLine {
        name: "prop1".into(),
        checked: n,
        max_err: worst,
        tol: 1e-10,
        absolute: true,
    }])
}

fn entropy_suite(opts: &Options) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xe7);
    let cases = 40;
    let mut worst = [0.0f64; 3];
    let mut checked = 0;
    for case in 0..cases {
        let bits = rng.gen_range(2..=4u8);
        let q = rng.gen_range(0.05..0.5);
        let signed = case % 2 == 0;
        let grid = if signed { QuantGrid::signed(bits, q)? } else { QuantGrid::unsigned(bits, q)? };
        let alpha = rng.gen_range(0.5..4.0) / (q * q);
        let topk = if signed { None } else { Some(3) };
        let n = rng.gen_range(3..12);
        let values: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(grid.min_level()..grid.max_level()))
            .collect();
        let g = entropy::entropy_penalty_gradients(&values, &grid, alpha, topk)?;
        let bits_of = |vals: &[f64], grid: &QuantGrid, a: f64| -> f64 {
            entropy::layer_mpmf(vals, grid, a, topk)
                .map(|m| vals.len() as f64 * entropy::shannon_entropy(&m))
                .unwrap_or(f64::NAN)
        };
        let block_floor = |xs: &[f64]| 1e-3 * xs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let fv: Vec<f64> = (0..n)
            .map(|i| {
                richardson(
                    &mut |t| {
                        let mut v = values.clone();
                        v[i] = t;
                        bits_of(&v, &grid, alpha)
                    },
                    values[i],
                    1e-6,
                )
            })
            .collect();
        let fq = richardson(&mut |s| bits_of(&values, &grid.with_step(s).expect("positive"), alpha), q, 1e-7);
        let fa = richardson(&mut |a| bits_of(&values, &grid, a), alpha, 1e-5 * alpha);
        let vf = block_floor(&g.values);
        for (a, d) in g.values.iter().zip(&fv) {
            worst[0] = worst[0].max(rel_err(*a, *d, vf));
        }
        worst[1] = worst[1].max(rel_err(g.step, fq, 1e-3 * g.step.abs().max(1e-12)));
        worst[2] = worst[2].max(rel_err(g.sharpness, fa, 1e-3 * g.sharpness.abs().max(1e-12)));
        checked += 1;
    }
    let line = |name: &str, max_err: f64| CheckLine {
        name: name.into(),
        checked,
        max_err,
        tol: 1e-4,
        absolute: false,
    };
    Ok(vec![
        line("entropy.values", worst[0]),
        line("entropy.step", worst[1]),
        line("entropy.sharp", worst[2]),
    ])
}

/// Small random R-CDL network with moderately sharp quantizers and a batch.
pub fn rcdl_fixture(opts: &Options) -> Result<(Model, Vec<(Vec<f64>, usize)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xdc1);
    let (inputs, classes, batch) = (6, 3, 8);
    let mut model = Model::init(inputs, &arch::mlp(&[inputs, opts.hidden, classes]), Some(5), &mut rng)?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data: Vec<(Vec<f64>, usize)> = (0..batch)
        .map(|_| {
            let x = (0..inputs).map(|_| normal.sample(&mut rng)).collect();
            (x, rng.gen_range(0..classes))
        })
        .collect();
    let refs: Vec<&[f64]> = data.iter().map(|(x, _)| x.as_slice()).collect();
    crate::train::init_quant_params(&mut model, &refs, 4, false, 1.0, 1.0)?;
    for l in 0..model.num_stages() {
        let layer = model.stage_mut(l);
        let qp = layer.quant.as_mut().expect("initialized");
        let (q, s) = (qp.q(), qp.s());
        *qp = LayerQuantParams::new(q, s, 3.0 / (q * q), 3.0 / (s * s), 4, 4)?;
    }
    Ok((model, data))
}

fn rcdl_suite(opts: &Options) -> Result<Vec<CheckLine>> {
    let (model, data) = rcdl_fixture(opts)?;
    let batch: Vec<(&[f64], usize)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (gamma, lambda) = (opts.gamma, opts.lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let analytic = batch_gradients(&model, Mode::Rcdl, &batch, gamma, lambda, &mut rng, &mut |_| Ok(()))?.grads;
    let objective = |m: &Model| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        batch_gradients(m, Mode::Rcdl, &batch, gamma, lambda, &mut rng, &mut |_| Ok(()))
            .map(|o| o.objective)
            .unwrap_or(f64::NAN)
    };
    // [w, q, s, α, β] blocks: (analytic, numeric) pairs.
    let mut blocks: [Vec<(f64, f64)>; 5] = Default::default();
    for l in 0..model.num_stages() {
        let g = &analytic.layers[l];
        for i in 0..model.stage(l).weights.len() {
            let w0 = model.stage(l).weights.data()[i];
            let fd = richardson(
                &mut |t| {
                    let mut m = model.clone();
                    m.stage_mut(l).weights.data_mut()[i] = t;
                    objective(&m)
                },
                w0,
                1e-5,
            );
            blocks[0].push((g.w[i], fd));
        }
        let qp = *model.quant(l)?;
        let mut param = |k: usize, get: fn(&LayerQuantParams) -> f64, set: fn(&mut LayerQuantParams, f64), a: f64| {
            let x0 = get(&qp);
            let fd = richardson(
                &mut |x| {
                    let mut m = model.clone();
                    set(m.stage_mut(l).quant.as_mut().expect("initialized"), x);
                    objective(&m)
                },
                x0,
                1e-5 * x0,
            );
            blocks[k].push((a, fd));
        };
        param(1, |p| p.q(), |p, v| p.log_q = v.ln(), g.q);
        param(3, |p| p.alpha(), |p, v| p.log_alpha = v.ln(), g.alpha);
        if l < model.act_widths().len() {
            param(2, |p| p.s(), |p, v| p.log_s = v.ln(), g.s);
            param(4, |p| p.beta(), |p, v| p.log_beta = v.ln(), g.beta);
        }
    }
    let names = ["rcdl.w", "rcdl.q", "rcdl.s", "rcdl.alpha", "rcdl.beta"];
    Ok(blocks
        .iter()
        .zip(names)
        .map(|(pairs, name)| {
            let scale = pairs.iter().fold(0.0f64, |m, &(a, _)| m.max(a.abs()));
            let max_err = pairs
                .iter()
                .map(|&(a, d)| rel_err(a, d, SCALE_FLOOR * scale))
                .fold(0.0f64, |m, e| m.max(if e.is_nan() { f64::INFINITY } else { e }));
            CheckLine {
                name: name.into(),
                checked: pairs.len(),
                max_err,
                tol: 1e-4,
                absolute: false,
            }
        })
        .collect())
}

pub fn run(suite: Suite, opts: &Options) -> Result<Vec<CheckLine>> {
    match suite {
        Suite::Quant => quant_suite(opts),
        Suite::Entropy => entropy_suite(opts),
        Suite::Rcdl => rcdl_suite(opts),
        Suite::Prop1 => prop1_suite(opts),
    }
}
