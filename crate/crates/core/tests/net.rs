use coded_dl::net::{arch, Layer, LayerKind, LayerQuantParams, Model, Mode, Tensor};
use coded_dl::quant::{self, QuantGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Integer network whose every weight and activation already sits on the
/// unit grid.
fn integer_mlp(rng: &mut ChaCha8Rng) -> Model {
    let sizes = [4, 6, 3];
    let kinds = arch::mlp(&sizes);
    let layers = kinds
        .into_iter()
        .map(|kind| {
            let n = kind.weight_len();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-2..=2) as f64).collect();
            Layer {
                weights: Tensor::from_vec(data),
                quant: kind
                    .has_weights()
                    .then(|| LayerQuantParams::new(1.0, 1.0, 1e6, 1e6, 8, 8).unwrap()),
                exempt_8bit: false,
                kind,
            }
        })
        .collect();
    Model::from_layers(4, layers, Some(5)).unwrap()
}

#[test]
fn cdl_on_grid_inputs_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let m = integer_mlp(&mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0..=3) as f64).collect();
        let fp = m.forward(&m.quantize_weights(Mode::Fp, &mut rng).unwrap(), &x, 0, &mut rng).unwrap();
        for mode in [Mode::Cdl, Mode::Rcdl] {
            let snap = m.quantize_weights(mode, &mut rng).unwrap();
            let t = m.forward(&snap, &x, 0, &mut rng).unwrap();
            for (a, b) in t.logits.iter().zip(&fp.logits) {
                assert!((a - b).abs() < 1e-9, "{mode}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn cdl_is_deterministic_per_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = Model::init(16, &arch::mlp(&[16, 10, 4]), Some(5), &mut rng).unwrap();
    m.set_uniform_quant(LayerQuantParams::new(0.1, 0.2, 50.0, 50.0, 4, 4).unwrap());
    let x: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snap = m.quantize_weights(Mode::Cdl, &mut rng).unwrap();
        m.forward(&snap, &x, 1, &mut rng).unwrap()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9).logits, run(10).logits);
}

/// Single dense layer: `Q_p` logits deviate from `Q_d` logits by a sum of
/// independent zero-mean terms with variance `Σ Var_i x_i²`.
#[test]
fn sampled_logits_stay_within_six_sigma_of_expected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n_in, n_out) = (64, 3);
    let kind = LayerKind::Dense {
        inputs: n_in,
        outputs: n_out,
    };
    let w: Vec<f64> = (0..n_in * n_out).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let qp = LayerQuantParams::new(0.1, 1.0, 30.0, 1.0, 4, 4).unwrap();
    let m = Model::from_layers(
        n_in,
        vec![Layer {
            kind,
            weights: Tensor::from_vec(w.clone()),
            quant: Some(qp),
            exempt_8bit: false,
        }],
        None,
    )
    .unwrap();
    let grid = QuantGrid::signed(4, 0.1).unwrap();
    let x: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let expected = m.forward(&m.quantize_weights(Mode::Rcdl, &mut rng).unwrap(), &x, 0, &mut rng).unwrap();
    let sigma: Vec<f64> = (0..n_out)
        .map(|o| {
            (0..n_in)
                .map(|i| {
                    let c = quant::make_cpmf(w[o * n_in + i], grid, 30.0).unwrap();
                    quant::moments(&c).unwrap().var * x[i] * x[i]
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    assert!(sigma.iter().all(|&s| s > 1e-3));
    for _ in 0..200 {
        let t = m.forward(&m.quantize_weights(Mode::Cdl, &mut rng).unwrap(), &x, 0, &mut rng).unwrap();
        for o in 0..n_out {
            assert!((t.logits[o] - expected.logits[o]).abs() <= 6.0 * sigma[o]);
        }
    }
}

#[test]
fn sharp_quantizers_reduce_to_rounding() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut m = Model::init(8, &arch::mlp(&[8, 6, 2]), Some(5), &mut rng).unwrap();
    m.set_uniform_quant(LayerQuantParams::new(0.125, 0.25, 1e7, 1e7, 4, 4).unwrap());
    let x: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
    let snap = m.quantize_weights(Mode::Rcdl, &mut rng).unwrap();
    let grid = QuantGrid::signed(4, 0.125).unwrap();
    for (sl, layer) in snap.layers.iter().zip(m.weighted_layers()) {
        for (&q, &w) in sl.values.iter().zip(layer.weights.data()) {
            let d = (w / 0.125).fract().abs();
            if (d - 0.5).abs() > 0.05 {
                assert!((q - grid.round(w)).abs() < 1e-9, "{w} → {q}");
            }
        }
    }
    let t = m.forward(&snap, &x, 0, &mut rng).unwrap();
    let act_grid = QuantGrid::unsigned(4, 0.25).unwrap();
    for (raw, q) in t.acts[0].raw.iter().zip(&t.acts[0].quantized) {
        if ((raw / 0.25).fract() - 0.5).abs() > 0.05 {
            assert!((q - act_grid.round(*raw)).abs() < 1e-9);
        }
    }
}

/// With nearly-hard quantizers most weights sit where `∂Q_d/∂θ = 2αVar`
/// vanishes, so the R-CDL weight gradient is far smaller than the FP one.
#[test]
fn hard_quantizer_gradient_vanishes_away_from_midpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = Model::init(8, &arch::mlp(&[8, 6, 3]), Some(5), &mut rng).unwrap();
    m.set_uniform_quant(LayerQuantParams::new(0.125, 0.25, 1e5, 1e5, 6, 6).unwrap());
    let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
    let batch = [(x.as_slice(), 1usize)];
    let grad_norm = |mode| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = coded_dl::train::batch_gradients(&m, mode, &batch, 0.0, 0.0, &mut rng, &mut |_| Ok(())).unwrap();
        out.grads.layers.iter().flat_map(|l| l.w.iter()).map(|g| g * g).sum::<f64>().sqrt()
    };
    let (fp, rcdl) = (grad_norm(Mode::Fp), grad_norm(Mode::Rcdl));
    assert!(fp > 0.0);
    assert!(rcdl < 0.1 * fp, "rcdl {rcdl} vs fp {fp}");
}
