//! Acceptance criteria 1–10, one line each. Runs without the libtest
//! harness so the verdict lines are never captured; exits nonzero if any
//! hard criterion fails. Criterion 8 is reported but never fails the run.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Instant;

use coded_dl::codec::{self, build_codebook, decode_layer, encode_layer, histogram, CompressedModel};
use coded_dl::data::{bundled_mnist_dir, gaussian_clusters, load_mnist_dir, ClusterSpec, Dataset};
use coded_dl::entropy::entropy_bits;
use coded_dl::gradcheck;
use coded_dl::net::{checkpoint, Mode, Model};
use coded_dl::parsim::{Cadence, CommLedger, DataParallelSim, ParallelPlan, PayloadPolicy};
use coded_dl::quant::{self, QuantGrid, Signedness};
use coded_dl::train::{batch_gradients, metrics::EpochMetrics, Observer, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const BITS: u8 = 4;
const EPOCHS: usize = 20;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------- oracles

/// Exhaustive CPMF over the grid, computed from scratch.
fn oracle_probs(theta: f64, levels: &[f64], alpha: f64) -> Vec<f64> {
    let z: Vec<f64> = levels.iter().map(|l| -alpha * (theta - l).powi(2)).collect();
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn random_instance(rng: &mut ChaCha8Rng) -> (f64, QuantGrid, f64) {
    let bits = rng.gen_range(1..=6u8);
    let q = 10f64.powf(rng.gen_range(-3.0..0.0));
    let alpha = 10f64.powf(rng.gen_range(0.0..4.0));
    let sign = if rng.gen() { Signedness::Signed } else { Signedness::Unsigned };
    let g = QuantGrid::new(bits, q, sign).unwrap();
    let theta = rng.gen_range(g.min_level() - 2.0 * q..g.max_level() + 2.0 * q);
    (theta, g, alpha)
}

/// `Q_d` measured from level `ic` with logits relative to it, so that the
/// difference quotients keep their precision when one level dominates.
fn shifted_qd(theta: f64, q: f64, alpha: f64, g: &QuantGrid, ic: i32, q0: f64) -> f64 {
    let lc = ic as f64 * q;
    let idx: Vec<i32> = (g.min_index()..=g.max_index()).collect();
    let z: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let li = i as f64 * q;
            -alpha * (lc - li) * (2.0 * theta - li - lc)
        })
        .collect();
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut den, mut num) = (0.0, 0.0);
    for (k, &i) in idx.iter().enumerate() {
        let p = (z[k] - zmax).exp();
        den += p;
        num += p * ((i - ic) as f64 * q + ic as f64 * (q - q0));
    }
    num / den
}

fn richardson(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let mut d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    let (coarse, fine) = (d(h), d(h / 2.0));
    (4.0 * fine - coarse) / 3.0
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs()).max(floor)
    }
}

// ---------------------------------------------------------------- 1–5

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let n = 10_000;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (theta, g, alpha) = random_instance(&mut rng);
        let levels = g.levels();
        let p = oracle_probs(theta, &levels, alpha);
        let lhs: f64 = p.iter().zip(&levels).map(|(p, l)| p * (theta - l).powi(2)).sum();
        let m = quant::moments(&quant::make_cpmf(theta, g, alpha).unwrap()).unwrap();
        worst = worst.max((lhs - (theta - m.mean).powi(2) - m.var).abs());
    }
    Verdict::new(worst < 1e-10, format!("{n} instances, max abs err {worst:.2e} (tol 1e-10)"))
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let n = 1000;
    let mut worst = [0.0f64; 3];
    for _ in 0..n {
        let (theta, g, alpha) = random_instance(&mut rng);
        let q = g.step();
        let c = quant::make_cpmf(theta, g, alpha).unwrap();
        let a = [
            quant::dqd_dtheta(&c).unwrap(),
            quant::dqd_dq(&c).unwrap(),
            quant::dqd_dsharpness(&c),
        ];
        let ic = g.index(g.nearest_pos(theta));
        let width = (1.0 / (2.0 * alpha * q)).min(q).min(1.0 / alpha.sqrt());
        let fd = [
            richardson(&mut |t| shifted_qd(t, q, alpha, &g, ic, q), theta, 1e-3 * width),
            richardson(&mut |s| shifted_qd(theta, s, alpha, &g, ic, q), q, 1e-3 * width * q / (q + theta.abs())),
            richardson(&mut |s| shifted_qd(theta, q, s, &g, ic, q), alpha, 1e-3 * alpha * (width / q).min(1.0)),
        ];
        // 1e-6 of each derivative's natural scale
        let floors = [
            1e-6,
            1e-6 * 1f64.max(theta.abs() / q),
            1e-6 * q.max(1.0 / (2.0 * alpha).sqrt()).powi(3),
        ];
        for k in 0..3 {
            let e = rel(a[k], fd[k], floors[k]);
            worst[k] = worst[k].max(if e.is_nan() { f64::INFINITY } else { e });
        }
    }
    let pass = worst[0] < 1e-5 && worst[1] < 1e-4 && worst[2] < 1e-4;
    Verdict::new(
        pass,
        format!(
            "{n} instances, max rel err dθ {:.2e} (tol 1e-5), dq {:.2e} (tol 1e-4), dα {:.2e} (tol 1e-4)",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn criterion_3() -> Verdict {
    let (q, alpha, exclusion) = (0.1, 700.0, 0.01);
    let g = QuantGrid::signed(3, q).unwrap();
    let levels = g.levels();
    let steps = 200_000;
    let (lo, hi) = (g.min_level(), g.max_level());
    // (distance to nearest midpoint, |Q_d − round|)
    let mut samples = Vec::with_capacity(steps + 1);
    let mut oracle_gap = 0.0f64;
    for k in 0..=steps {
        let theta = lo + (hi - lo) * k as f64 / steps as f64;
        let qd = quant::qd(&quant::make_cpmf(theta, g, alpha).unwrap());
        let exact: f64 = oracle_probs(theta, &levels, alpha).iter().zip(&levels).map(|(p, l)| p * l).sum();
        oracle_gap = oracle_gap.max((qd - exact).abs());
        let u = theta / q - 0.5;
        let to_mid = (u - u.round()).abs() * q;
        samples.push((to_mid, (qd - g.round(theta)).abs()));
    }
    let max_beyond = |r: f64| samples.iter().filter(|s| s.0 > r).map(|s| s.1).fold(0.0, f64::max);
    let worst = max_beyond(exclusion);
    let mut needed = exclusion;
    while max_beyond(needed) >= 5e-3 && needed < q / 2.0 {
        needed += 1e-4;
    }
    Verdict::new(
        worst < 5e-3 && oracle_gap < 1e-12,
        format!(
            "max |Q_d − round| = {worst:.4} beyond ±{exclusion} of midpoints (tol 5e-3); \
             exact expectation agrees to {oracle_gap:.1e}; the tolerance first holds beyond ±{needed:.4}"
        ),
    )
}

fn criterion_4() -> Verdict {
    let opts = gradcheck::Options::default();
    let (model, data) = gradcheck::rcdl_fixture(&opts).unwrap();
    let n_params = model.num_weights() + 2 * model.num_stages() + 2 * model.act_widths().len();
    let batch: Vec<(&[f64], usize)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (lambda, gamma) = (0.05, 0.05);
    let eval = |m: &Model| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        batch_gradients(m, Mode::Rcdl, &batch, gamma, lambda, &mut rng, &mut |_| Ok(())).unwrap()
    };
    let grads = eval(&model).grads;
    let obj = |m: &Model| eval(m).objective;
    // [w, q, s, α, β]
    let mut pairs: [Vec<(f64, f64)>; 5] = Default::default();
    for l in 0..model.num_stages() {
        let g = &grads.layers[l];
        for i in 0..model.stage(l).weights.len() {
            let w0 = model.stage(l).weights.data()[i];
            let fd = richardson(
                &mut |t| {
                    let mut m = model.clone();
                    m.stage_mut(l).weights.data_mut()[i] = t;
                    obj(&m)
                },
                w0,
                1e-5,
            );
            pairs[0].push((g.w[i], fd));
        }
        let qp = *model.quant(l).unwrap();
        let mut natural = |k: usize, x0: f64, set: &dyn Fn(&mut coded_dl::net::LayerQuantParams, f64), a: f64| {
            let fd = richardson(
                &mut |x| {
                    let mut m = model.clone();
                    set(m.stage_mut(l).quant.as_mut().unwrap(), x);
                    obj(&m)
                },
                x0,
                1e-5 * x0,
            );
            pairs[k].push((a, fd));
        };
        natural(1, qp.q(), &|p, v| p.log_q = v.ln(), g.q);
        natural(3, qp.alpha(), &|p, v| p.log_alpha = v.ln(), g.alpha);
        if l < model.act_widths().len() {
            natural(2, qp.s(), &|p, v| p.log_s = v.ln(), g.s);
            natural(4, qp.beta(), &|p, v| p.log_beta = v.ln(), g.beta);
        }
    }
    let names = ["w", "q", "s", "α", "β"];
    let mut pass = n_params <= 200;
    let mut parts = Vec::new();
    for (k, ps) in pairs.iter().enumerate() {
        let scale = ps.iter().fold(0.0f64, |m, p| m.max(p.0.abs()));
        let worst = ps.iter().map(|&(a, d)| rel(a, d, 1e-6 * scale)).fold(0.0, f64::max);
        pass &= !ps.is_empty() && worst < 1e-4;
        parts.push(format!("{} {:.1e}", names[k], worst));
    }
    Verdict::new(
        pass,
        format!("{n_params} params, λ=γ=0.05, max rel err {} (tol 1e-4)", parts.join(", ")),
    )
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut bound_ok, mut lossless) = (true, true);
    let mut tightest = f64::INFINITY;
    for _ in 0..100 {
        let k = rng.gen_range(2..=64);
        let weights: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(3) + 1e-3).collect();
        let total: f64 = weights.iter().sum();
        let syms: Vec<i32> = (0..100_000)
            .map(|_| {
                let mut u = rng.gen::<f64>() * total;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        return i as i32 - k / 2;
                    }
                    u -= w;
                }
                k - 1 - k / 2
            })
            .collect();
        let hist = histogram(&syms);
        let n = syms.len() as f64;
        let h = entropy_bits(&hist.iter().map(|&(_, c)| c as f64 / n).collect::<Vec<_>>());
        let book = build_codebook(&syms).unwrap();
        let (payload, bits) = encode_layer(&syms, &book).unwrap();
        let avg = bits as f64 / n;
        bound_ok &= h <= avg + 1e-12 && avg < h + 1.0;
        tightest = tightest.min(h + 1.0 - avg);
        lossless &= decode_layer(&payload, bits, &book, syms.len()).unwrap() == syms;
    }
    Verdict::new(
        bound_ok && lossless,
        format!("100 histograms × 1e5 symbols: H ≤ L < H+1 {bound_ok} (min slack {tightest:.3} bits), lossless {lossless}"),
    )
}

// ---------------------------------------------------------------- training

struct Run {
    history: Vec<EpochMetrics>,
    ledger: Option<CommLedger>,
    checkpoint: Vec<u8>,
}

fn mnist() -> &'static (Dataset, Dataset) {
    static DATA: std::sync::OnceLock<(Dataset, Dataset)> = std::sync::OnceLock::new();
    DATA.get_or_init(|| load_mnist_dir(&bundled_mnist_dir()).expect("bundled MNIST subset"))
}

/// Pilot-tuned hyperparameters shared by every desk-scale run. The initial
/// sharpness is the library's 500 at b = 6 rescaled to keep `α⁰·(q⁰)²`
/// fixed: `q⁰² ∝ 2^(1−b)`, so b = 4 gets 500/4.
fn config(mode: Mode, penalty: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        lambda: penalty,
        gamma: penalty,
        bits: BITS,
        epochs: EPOCHS,
        seed,
        lr_w: 0.2,
        lr_q: 0.5,
        lr_s: 0.5,
        lr_alpha: 0.5,
        lr_beta: 0.5,
        alpha_init: 125.0,
        beta_init: 125.0,
        ..Default::default()
    }
}

fn run(mode: Mode, penalty: f64, seed: u64, coded_sync: bool) -> &'static Run {
    static RUNS: Mutex<Option<HashMap<String, &'static Run>>> = Mutex::new(None);
    let key = format!("{mode}/{penalty}/{seed}/{coded_sync}");
    let mut guard = RUNS.lock().unwrap();
    let map = guard.get_or_insert_with(HashMap::new);
    if let Some(r) = map.get(&key) {
        return r;
    }
    let (train, test) = mnist();
    let t0 = Instant::now();
    let mut state = TrainState::new(config(mode, penalty, seed), train).unwrap();
    let mut sim = coded_sync.then(|| {
        let mut plan = ParallelPlan::data_parallel(2, Cadence::Epoch, PayloadPolicy::HuffmanCoded, BITS).unwrap();
        plan.seed = seed;
        DataParallelSim::new(plan).unwrap()
    });
    let observer: &mut dyn Observer = match sim.as_mut() {
        Some(s) => s,
        None => &mut (),
    };
    state.run(train, test, observer).unwrap();
    let last = state.history.last().unwrap();
    eprintln!(
        "  run {key}: test_acc {:.4}, huffman bits/weight {:?}, {:.0}s",
        last.test_acc,
        last.huffman_w_bits,
        t0.elapsed().as_secs_f64()
    );
    let r: &'static Run = Box::leak(Box::new(Run {
        history: state.history.clone(),
        ledger: sim.map(|s| s.ledger),
        checkpoint: checkpoint::encode(&state.model),
    }));
    map.insert(key, r);
    r
}

fn final_acc(r: &Run) -> f64 {
    r.history.last().unwrap().test_acc
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_6() -> Verdict {
    let fp: Vec<f64> = SEEDS.iter().map(|&s| final_acc(run(Mode::Fp, 0.0, s, false))).collect();
    let rc: Vec<f64> = SEEDS.iter().map(|&s| final_acc(run(Mode::Rcdl, 0.0, s, false))).collect();
    let gap = 100.0 * (mean(&fp) - mean(&rc));
    Verdict::new(
        gap <= 1.5,
        format!(
            "mean test acc fp {:.2}% vs R-CDL b={BITS} {:.2}% over seeds {SEEDS:?}: gap {gap:.2} pp (tol 1.5)",
            100.0 * mean(&fp),
            100.0 * mean(&rc)
        ),
    )
}

fn criterion_7() -> Verdict {
    let base = run(Mode::Rcdl, 0.0, 1, false).history.last().unwrap().huffman_w_bits.unwrap();
    let coded = run(Mode::Rcdl, 0.05, 1, true);
    let bits = coded.history.last().unwrap().huffman_w_bits.unwrap();
    let cdl = run(Mode::Cdl, 0.05, 1, false).history.last().unwrap().huffman_w_bits.unwrap();
    let totals = &coded.ledger.as_ref().unwrap().epoch_totals;
    let (first, last) = (totals[0], *totals.last().unwrap());
    let a = bits <= 0.75 * base && bits < BITS as f64;
    let b = last < first;
    Verdict::new(
        a && b,
        format!(
            "(a) bits/weight {bits:.3} vs {base:.3} at (0,0): {:.1}% lower (need ≥ 25%, < {BITS}) [CDL {cdl:.3}]; \
             (b) coded sync bytes epoch 1 {first} → epoch {EPOCHS} {last}",
            100.0 * (1.0 - bits / base)
        ),
    )
}

fn criterion_8() -> Verdict {
    let rc = median(SEEDS.iter().map(|&s| final_acc(run(Mode::Rcdl, 0.0, s, false))).collect());
    let cd = median(SEEDS.iter().map(|&s| final_acc(run(Mode::Cdl, 0.0, s, false))).collect());
    Verdict::new(
        rc >= cd - 0.003,
        format!("median test acc R-CDL {:.2}% vs CDL {:.2}% at λ=γ=0, b={BITS} (slack 0.3 pp)", 100.0 * rc, 100.0 * cd),
    )
}

/// Least-squares slope over the last tenth of the epochs (at least two).
fn tail_slope(v: &[f64]) -> f64 {
    let w = (v.len() / 10).max(2);
    let tail = &v[v.len() - w..];
    let xm = (w as f64 - 1.0) / 2.0;
    let ym = mean(tail);
    let num: f64 = tail.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    let den: f64 = (0..w).map(|i| (i as f64 - xm).powi(2)).sum();
    num / den
}

fn criterion_9() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, r) in [("R-CDL", run(Mode::Rcdl, 0.05, 1, true)), ("CDL", run(Mode::Cdl, 0.05, 1, false))] {
        let obj: Vec<f64> = r.history.iter().map(|m| m.objective).collect();
        let (first, last) = (obj[0], *obj.last().unwrap());
        let slope = tail_slope(&obj).abs() / first.abs();
        pass &= last < first && slope < 0.01;
        parts.push(format!("{name} {first:.4} → {last:.4}, tail slope {:.2}%/epoch", 100.0 * slope));
    }
    Verdict::new(pass, parts.join("; "))
}

fn criterion_10() -> Verdict {
    let (train, test) = gaussian_clusters(&ClusterSpec::default()).unwrap();
    let cfg = TrainConfig {
        arch: coded_dl::train::Arch::Mlp,
        mlp_hidden: vec![16],
        epochs: 3,
        bits: BITS,
        lambda: 0.05,
        gamma: 0.05,
        probe_size: 64,
        ..Default::default()
    };
    let artifacts = || {
        let mut st = TrainState::new(cfg.clone(), &train).unwrap();
        st.run(&train, &test, &mut ()).unwrap();
        let ckpt = checkpoint::encode(&st.model);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let z = codec::compress_model(&st.model, BITS, &mut rng).unwrap().to_bytes();
        (ckpt, z)
    };
    let (c1, z1) = artifacts();
    let (c2, z2) = artifacts();
    let reloaded = checkpoint::encode(&checkpoint::decode(&c1).unwrap()) == c1;
    let decoded = CompressedModel::from_bytes(&z1).unwrap();
    let verify = decoded.to_bytes() == z1;
    // the desk-scale R-CDL run must also reproduce bit-exactly
    let mnist_repeat = {
        let (train, test) = mnist();
        let mut st = TrainState::new(config(Mode::Rcdl, 0.0, 1), train).unwrap();
        st.run(train, test, &mut ()).unwrap();
        checkpoint::encode(&st.model) == run(Mode::Rcdl, 0.0, 1, false).checkpoint
    };
    Verdict::new(
        c1 == c2 && z1 == z2 && reloaded && verify && mnist_repeat,
        format!(
            "checkpoint identical {}, compressed identical {}, reload exact {reloaded}, verify {verify}, \
             MNIST R-CDL rerun identical {mnist_repeat}",
            c1 == c2,
            z1 == z2
        ),
    )
}

fn main() {
    type Criterion = (usize, fn() -> Verdict, bool);
    let criteria: [Criterion; 10] = [
        (1, criterion_1, true),
        (2, criterion_2, true),
        (3, criterion_3, true),
        (4, criterion_4, true),
        (5, criterion_5, true),
        (6, criterion_6, true),
        (7, criterion_7, true),
        (8, criterion_8, false),
        (9, criterion_9, true),
        (10, criterion_10, true),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, f, hard) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let v = f();
        let tag = match (v.pass, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (report only)",
        };
        println!(
            "criterion {id:>2}: {tag} [{:.1}s] {}",
            t0.elapsed().as_secs_f64(),
            v.detail
        );
        if !v.pass && hard {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all hard criteria passed");
}
