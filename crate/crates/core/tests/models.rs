use std::sync::Arc;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volcast_autodiff::{grad_check, grad_check_params, ParamSet, Tape, Tensor, Var};
use volcast_core::black_scholes::{bs_price, MarketPoint};
use volcast_core::models::convtf::{sffn_schedule, ConvTf, ConvTfConfig, Head, MultiConvAttn, SffnConfig};
use volcast_core::models::piconvtf::{call_prices, eval_call_grid, physics_loss, piconvtf_loss, PiConvTf};
use volcast_core::models::pinn::{pinn_forward, pinn_loss, pinn_outputs, price_derivatives, Pinn, PinnOutputs};
use volcast_core::models::recurrent::{convlstm_cell_step, sa_memory_step, CellWeights, ConvLstmState, RecurrentModel};
use volcast_core::models::{
    build_model, Conv, DerivativeMode, Forecaster, InputScaling, ModelKind, ModelSettings, PhysicsLossConfig,
};
use volcast_core::surface::{KnotAxes, MarketMatrices, VolSurfaceGrid, WindowedSample, GRID};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Cross-correlation with zero "same" padding, by direct summation.
fn naive_conv(x: &[f64], c_in: usize, h: usize, w: usize, k: &[f64], c_out: usize, ks: usize) -> Vec<f64> {
    let p = ks as isize / 2;
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let (iy, ix) = (y as isize + ky as isize - p, xx as isize + kx as isize - p);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k[((o * c_in + c) * ks + ky) * ks + kx] * x[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn date(day: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(day as u64)
}

fn smile_grid(day: u32, level: f64, curvature: f64) -> VolSurfaceGrid {
    let axes = KnotAxes::standard();
    let values = axes
        .moneyness
        .iter()
        .flat_map(|&m| axes.maturity.iter().map(move |&t| level + curvature * (m - 1.0).powi(2) + 0.02 * t))
        .collect();
    VolSurfaceGrid::new(date(day), values, 3000.0, 0.02).unwrap()
}

fn sample(window: usize, rng: &mut ChaCha8Rng) -> WindowedSample {
    let days: Vec<Arc<VolSurfaceGrid>> = (0..=window as u32)
        .map(|d| Arc::new(smile_grid(d, 0.2 + rng.random_range(0.0..0.05), 1.5)))
        .collect();
    let target = Arc::clone(&days[window]);
    WindowedSample {
        inputs: days[..window].to_vec(),
        market: MarketMatrices::for_grid(&KnotAxes::standard(), &target),
        target,
    }
}

fn toy_recurrent(kind: ModelKind, layers: usize, seed: u64) -> RecurrentModel {
    let settings = ModelSettings {
        hidden: 4,
        layers,
        attn_channels: 2,
        ..ModelSettings::defaults(kind)
    };
    RecurrentModel::new(kind, &settings, InputScaling::identity(1.0), seed).unwrap()
}

fn toy_convtf_config(window: usize) -> ConvTfConfig {
    ConvTfConfig {
        window,
        input_channels: 1,
        d: 8,
        heads: 2,
        layers: 1,
        kernel: 3,
        head: Head::Sffn,
        sffn: SffnConfig {
            layers: 30,
            peak: 16,
            kernel: 1,
        },
        residual: true,
    }
}

fn toy_convtf(window: usize, seed: u64) -> ConvTf {
    let settings = ModelSettings::defaults(ModelKind::ConvTf);
    ConvTf::with_config(ModelKind::ConvTf, &settings, toy_convtf_config(window), InputScaling::identity(1.0), seed).unwrap()
}

fn inputs(tape: &Tape, rng: &mut ChaCha8Rng, n: usize, c: usize, hw: usize) -> Vec<Var> {
    (0..n).map(|_| tape.constant(random_tensor(rng, &[c, hw, hw], 1.0))).collect()
}

/// Zero biases leave many SFFN pre-activations next to the leaky-ReLU kink,
/// where central differences straddle it; probe at a generic point instead.
fn randomize_biases(params: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for p in params.iter_mut().filter(|p| p.name.ends_with(".b")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
}

fn l1_to_random_target(tape: &Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    let target = tape.constant(random_tensor(&mut rng, &tape.shape(out), 1.0));
    tape.mean(tape.abs(tape.sub(out, target).unwrap()))
}

// ---- ConvLSTM cell --------------------------------------------------------

fn cell_params(rng: &mut ChaCha8Rng, c_in: usize, hd: usize, scale: f64) -> (ParamSet, CellWeights) {
    let mut p = ParamSet::new();
    let kernel = p.insert("k", random_tensor(rng, &[4 * hd, c_in + hd, 3, 3], scale)).unwrap();
    let bias = p.insert("b", random_tensor(rng, &[4 * hd], scale)).unwrap();
    (
        p,
        CellWeights {
            conv: Conv {
                kernel,
                bias: Some(bias),
            },
            hidden: hd,
        },
    )
}

#[test]
fn cell_with_zero_weights_halves_the_cell_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut p, w) = cell_params(&mut rng, 1, 3, 0.5);
    p.iter_mut().for_each(|t| t.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let tape = Tape::new();
    let bound = p.bind_frozen(&tape);
    let c_prev = random_tensor(&mut rng, &[3, 5, 5], 2.0);
    let prev = ConvLstmState {
        h: tape.constant(random_tensor(&mut rng, &[3, 5, 5], 1.0)),
        c: tape.constant(c_prev.clone()),
    };
    let x = tape.constant(random_tensor(&mut rng, &[1, 5, 5], 1.0));
    let (next, gates) = convlstm_cell_step(&tape, &bound, x, &prev, &w).unwrap();
    for g in [gates.f, gates.i, gates.o] {
        assert!(tape.value(g).data().iter().all(|&v| v == 0.5));
    }
    assert!(tape.value(gates.g).data().iter().all(|&v| v == 0.0));
    let want_c: Vec<f64> = c_prev.data().iter().map(|c| 0.5 * c).collect();
    let want_h: Vec<f64> = want_c.iter().map(|c| 0.5 * c.tanh()).collect();
    assert_eq!(tape.value(next.c).data(), &want_c[..]);
    assert_eq!(tape.value(next.h).data(), &want_h[..]);
}

#[test]
fn cell_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hd = 3;
    let (p, w) = cell_params(&mut rng, 1, hd, 0.5);
    let x = random_tensor(&mut rng, &[1, 20, 20], 1.0);
    let h0 = random_tensor(&mut rng, &[hd, 20, 20], 1.0);
    let c0 = random_tensor(&mut rng, &[hd, 20, 20], 1.0);

    let tape = Tape::new();
    let bound = p.bind_frozen(&tape);
    let prev = ConvLstmState {
        h: tape.constant(h0.clone()),
        c: tape.constant(c0.clone()),
    };
    let (next, _) = convlstm_cell_step(&tape, &bound, tape.constant(x.clone()), &prev, &w).unwrap();

    let stacked: Vec<f64> = x.data().iter().chain(h0.data()).copied().collect();
    let kernel = &p.iter().next().unwrap().value;
    let bias = &p.iter().nth(1).unwrap().value;
    let z = naive_conv(&stacked, 1 + hd, 20, 20, kernel.data(), 4 * hd, 3);
    let n = hd * 400;
    let pre = |gate: usize, i: usize| z[gate * n + i] + bias.data()[gate * hd + i / 400];
    let mut want_c = vec![0.0; n];
    let mut want_h = vec![0.0; n];
    for i in 0..n {
        let (f, ig, g, o) = (sigmoid(pre(0, i)), sigmoid(pre(1, i)), pre(2, i).tanh(), sigmoid(pre(3, i)));
        want_c[i] = f * c0.data()[i] + ig * g;
        want_h[i] = o * want_c[i].tanh();
    }
    assert!(max_diff(tape.value(next.c).data(), &want_c) < 1e-10);
    assert!(max_diff(tape.value(next.h).data(), &want_h) < 1e-10);
}

#[test]
fn cell_gates_and_hidden_stay_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let (p, w) = cell_params(&mut rng, 2, 3, 3.0);
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        let prev = ConvLstmState {
            h: tape.constant(random_tensor(&mut rng, &[3, 6, 6], 1.0)),
            c: tape.constant(random_tensor(&mut rng, &[3, 6, 6], 5.0)),
        };
        let x = tape.constant(random_tensor(&mut rng, &[2, 6, 6], 10.0));
        let (next, gates) = convlstm_cell_step(&tape, &bound, x, &prev, &w).unwrap();
        for g in [gates.f, gates.i, gates.o] {
            assert!(tape.value(g).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(tape.value(gates.g).data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(tape.value(next.h).data().iter().all(|&v| v.abs() <= 1.0));
    }
}

#[test]
fn cell_rejects_mismatched_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (p, w) = cell_params(&mut rng, 1, 3, 0.5);
    let tape = Tape::new();
    let bound = p.bind_frozen(&tape);
    let prev = ConvLstmState {
        h: tape.constant(Tensor::zeros(&[3, 5, 5])),
        c: tape.constant(Tensor::zeros(&[3, 5, 5])),
    };
    let x = tape.constant(Tensor::zeros(&[1, 6, 6]));
    assert!(convlstm_cell_step(&tape, &bound, x, &prev, &w).is_err());
}

// ---- self-attention memory ------------------------------------------------

#[test]
fn memory_attention_rows_sum_to_one_and_memory_stays_bounded() {
    let model = toy_recurrent(ModelKind::SaConvLstm, 1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = model.memories[0];
    for _ in 0..5 {
        let tape = Tape::new();
        let bound = model.params().bind_frozen(&tape);
        let h = tape.constant(random_tensor(&mut rng, &[4, 6, 6], 3.0));
        let m = tape.constant(random_tensor(&mut rng, &[4, 6, 6], 1.0));
        let step = sa_memory_step(&tape, &bound, h, m, &w).unwrap();
        for a in [step.attn_h, step.attn_m] {
            let v = tape.value(a);
            assert_eq!(v.shape(), &[36, 36]);
            for row in v.data().chunks(36) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
        assert!(tape.value(step.m_next).data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn memory_with_zero_weights_is_a_damped_pass_through() {
    let mut model = toy_recurrent(ModelKind::SaConvLstm, 1, 6);
    for p in model.params_mut().iter_mut().filter(|p| p.name.contains(".sa.")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m_prev = random_tensor(&mut rng, &[4, 5, 5], 1.0);
    let tape = Tape::new();
    let bound = model.params().bind_frozen(&tape);
    let h = tape.constant(random_tensor(&mut rng, &[4, 5, 5], 1.0));
    let step = sa_memory_step(&tape, &bound, h, tape.constant(m_prev.clone()), &model.memories[0]).unwrap();
    assert!(tape.value(step.input_gate).data().iter().all(|&v| v == 0.5));
    let half: Vec<f64> = m_prev.data().iter().map(|v| 0.5 * v).collect();
    let quarter: Vec<f64> = m_prev.data().iter().map(|v| 0.25 * v).collect();
    assert_eq!(tape.value(step.m_next).data(), &half[..]);
    assert_eq!(tape.value(step.h_out).data(), &quarter[..]);
}

#[test]
fn default_memory_uses_eight_query_key_channels() {
    let model = RecurrentModel::new(
        ModelKind::SaConvLstm,
        &ModelSettings::defaults(ModelKind::SaConvLstm),
        InputScaling::identity(1.0),
        7,
    )
    .unwrap();
    let w = model.memories[0];
    let out_channels = |c: Conv| model.params().get(c.kernel).value.shape()[0];
    assert_eq!(out_channels(w.q), 8);
    assert_eq!(out_channels(w.k_h), 8);
    assert_eq!(out_channels(w.k_m), 8);
    assert_eq!(out_channels(w.v_h), 64);
    assert_eq!(out_channels(w.v_m), 64);
    assert_eq!(model.params().get(w.z.kernel).value.shape(), &[64, 128, 1, 1]);
}

// ---- recurrent rollout ----------------------------------------------------

#[test]
fn two_layer_rollout_feeds_hidden_maps_upward() {
    for kind in [ModelKind::ConvLstm, ModelKind::SaConvLstm] {
        let model = toy_recurrent(kind, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::new();
        let bound = model.params().bind_frozen(&tape);
        let xs = inputs(&tape, &mut rng, 3, 1, 20);
        let r = model.rollout(&tape, &bound, &xs).unwrap();
        assert_eq!(tape.shape(r.output), vec![1, 20, 20]);
        assert_eq!(r.layer_input_channels, vec![1, 4]);
    }
}

#[test]
fn rollout_rejects_empty_window_and_zero_layers() {
    let model = toy_recurrent(ModelKind::ConvLstm, 1, 9);
    let tape = Tape::new();
    let bound = model.params().bind_frozen(&tape);
    assert!(model.rollout(&tape, &bound, &[]).is_err());
    let settings = ModelSettings {
        layers: 0,
        ..ModelSettings::defaults(ModelKind::ConvLstm)
    };
    let err = RecurrentModel::new(ModelKind::ConvLstm, &settings, InputScaling::identity(1.0), 1).unwrap_err();
    assert!(err.to_string().contains("layer"), "{err}");
}

#[test]
fn recurrent_prediction_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = sample(4, &mut rng);
    let a = toy_recurrent(ModelKind::SaConvLstm, 1, 10).predict(&s).unwrap();
    let b = toy_recurrent(ModelKind::SaConvLstm, 1, 10).predict(&s).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 400);
}

#[test]
fn recurrent_models_pass_gradient_checks() {
    for kind in [ModelKind::ConvLstm, ModelKind::SaConvLstm] {
        for seed in [1, 2, 3] {
            let model = toy_recurrent(kind, 1, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[1, 6, 6], 1.0)).collect();
            let report = grad_check_params(
                |tape, bound| {
                    let xs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
                    let r = model.rollout(tape, bound, &xs).unwrap();
                    Ok(l1_to_random_target(tape, r.output, seed))
                },
                model.params(),
                4,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{kind} seed {seed}: {}", report.max_rel_error);
        }
    }
}

// ---- multi-head convolutional attention ----------------------------------

fn attention_block(d: usize, heads: usize, seed: u64) -> (ParamSet, MultiConvAttn) {
    let mut p = ParamSet::new();
    let attn = MultiConvAttn::new(&mut p, "attn", d, heads, 3, seed).unwrap();
    (p, attn)
}

/// Direct per-pixel evaluation of the attention output for query `q`.
fn naive_attention(p: &ParamSet, attn: &MultiConvAttn, q: &[f64], kv: &[Vec<f64>], hw: usize) -> Vec<f64> {
    let (d, dh, cells) = (attn.d, attn.head_channels(), hw * hw);
    let w1 = &p.get(attn.w1.kernel).value;
    let w2 = &p.get(attn.w2.kernel).value;
    let qa = naive_conv(q, d, hw, hw, w1.data(), d, 3);
    let keys: Vec<Vec<f64>> = kv.iter().map(|x| naive_conv(x, d, hw, hw, w2.data(), d, 3)).collect();
    let mut out = vec![0.0; d * cells];
    for j in 0..attn.heads {
        let w3 = &p.get(attn.w3[j]).value;
        let head = |v: &[f64]| v[j * dh * cells..(j + 1) * dh * cells].to_vec();
        let scores: Vec<Vec<f64>> = keys
            .iter()
            .map(|k| {
                let stacked: Vec<f64> = head(&qa).into_iter().chain(head(k)).collect();
                naive_conv(&stacked, 2 * dh, hw, hw, w3.data(), 1, 3)
            })
            .collect();
        for px in 0..cells {
            let mx = scores.iter().map(|s| s[px]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s[px] - mx).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..dh {
                out[(j * dh + c) * cells + px] = keys
                    .iter()
                    .zip(&e)
                    .map(|(k, a)| a / total * k[(j * dh + c) * cells + px])
                    .sum();
            }
        }
    }
    out
}

#[test]
fn attention_matches_direct_evaluation() {
    let (p, attn) = attention_block(4, 2, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let maps: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut rng, &[4, 7, 7], 1.0)).collect();
    let tape = Tape::new();
    let bound = p.bind_frozen(&tape);
    let vars: Vec<Var> = maps.iter().map(|m| tape.constant(m.clone())).collect();
    let out = attn.apply(&tape, &bound, &vars, &vars).unwrap();
    let kv: Vec<Vec<f64>> = maps.iter().map(|m| m.data().to_vec()).collect();
    for (k, &o) in out.iter().enumerate() {
        let want = naive_attention(&p, &attn, &kv[k], &kv, 7);
        assert!(max_diff(tape.value(o).data(), &want) < 1e-10);
    }
}

#[test]
fn single_slot_attention_returns_the_values() {
    let (p, attn) = attention_block(8, 4, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&mut rng, &[8, 5, 5], 1.0);
    let tape = Tape::new();
    let bound = p.bind_frozen(&tape);
    let v = tape.constant(x.clone());
    let out = attn.apply_traced(&tape, &bound, &[v], &[v]).unwrap();
    for w in &out.weights[0] {
        assert!(tape.value(*w).data().iter().all(|&a| a == 1.0));
    }
    let want = naive_conv(x.data(), 8, 5, 5, p.get(attn.w2.kernel).value.data(), 8, 3);
    assert!(max_diff(tape.value(out.outputs[0]).data(), &want) < 1e-12);
}

#[test]
fn attention_weights_normalise_and_heads_stay_in_value_envelope() {
    let (p, attn) = attention_block(8, 2, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..3 {
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        let maps: Vec<Var> = inputs(&tape, &mut rng, 4, 8, 6);
        let out = attn.apply_traced(&tape, &bound, &maps, &maps).unwrap();
        for per_head in &out.weights {
            for &w in per_head {
                let v = tape.value(w);
                assert_eq!(v.shape(), &[4, 6, 6]);
                for px in 0..36 {
                    let s: f64 = (0..4).map(|i| v.data()[i * 36 + px]).sum();
                    assert!((s - 1.0).abs() < 1e-10);
                }
            }
        }
        for heads in &out.head_outputs {
            for (j, &o) in heads.iter().enumerate() {
                let vals: Vec<Tensor> = out.values[j].iter().map(|&v| tape.value(v)).collect();
                for (e, &y) in tape.value(o).data().iter().enumerate() {
                    let lo = vals.iter().map(|v| v.data()[e]).fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().map(|v| v.data()[e]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(y >= lo - 1e-10 && y <= hi + 1e-10);
                }
            }
        }
    }
}

#[test]
fn attention_passes_gradient_checks() {
    for seed in [1, 2, 3] {
        let (p, attn) = attention_block(4, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[4, 5, 5], 1.0)).collect();
        let report = grad_check_params(
            |tape, bound| {
                let vars: Vec<Var> = maps.iter().map(|m| tape.constant(m.clone())).collect();
                let out = attn.apply(tape, bound, &vars[..1], &vars).unwrap();
                Ok(l1_to_random_target(tape, out[0], seed))
            },
            &p,
            6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {} at {}: {} vs {}", report.max_rel_error, report.worst_index, report.analytic[report.worst_index], report.numeric[report.worst_index]);
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut p = ParamSet::new();
    assert!(MultiConvAttn::new(&mut p, "a", 8, 3, 3, 1).is_err());
}

// ---- ConvTF ---------------------------------------------------------------

#[test]
fn embedding_keeps_spatial_size_and_reaches_d() {
    let model = toy_convtf(3, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tape = Tape::new();
    let bound = model.params().bind_frozen(&tape);
    let xs = inputs(&tape, &mut rng, 3, 1, 20);
    for e in model.feature_embed(&tape, &bound, &xs).unwrap() {
        assert_eq!(tape.shape(e), vec![8, 20, 20]);
    }
    assert_eq!(model.config.embed_schedule(), [1, 2, 4, 8]);
}

#[test]
fn default_convtf_uses_eight_channels_per_head() {
    let cfg = ConvTfConfig::from_settings(&ModelSettings::defaults(ModelKind::ConvTf), 10).unwrap();
    assert_eq!((cfg.d, cfg.heads, cfg.d / cfg.heads), (32, 4, 8));
    assert_eq!(cfg.embed_schedule(), [4, 8, 16, 32]);
    let bad = ConvTfConfig { heads: 3, ..cfg.clone() };
    assert!(bad.validate().is_err());
}

#[test]
fn sffn_schedule_and_zero_weights() {
    let widths = sffn_schedule(32, &SffnConfig::default()).unwrap();
    assert_eq!(widths.len(), 30);
    assert_eq!(widths.iter().max(), Some(&128));
    assert_eq!(widths.last(), Some(&1));

    let mut model = toy_convtf(2, 15);
    for p in model.params_mut().iter_mut().filter(|p| p.name.starts_with("sffn")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let tape = Tape::new();
    let bound = model.params().bind_frozen(&tape);
    let x = tape.constant(random_tensor(&mut rng, &[8, 20, 20], 1.0));
    let y = model.sffn_forward(&tape, &bound, x).unwrap();
    assert_eq!(tape.shape(y), vec![1, 20, 20]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    assert_eq!(model.head.len(), 30);
}

#[test]
fn sffn_passes_gradient_checks() {
    for seed in [1, 2, 3] {
        let model = toy_convtf(2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Few pixels keep the probed pre-activations clear of leaky-ReLU kinks.
        let x = random_tensor(&mut rng, &[8, 2, 2], 1.0);
        let mut params = model.params().clone();
        params
            .iter_mut()
            .filter(|p| !p.name.starts_with("sffn"))
            .for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
        // Shortcut branches start at zero; probe with live kernels.
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ffe);
        for p in params.iter_mut().filter(|p| p.name.starts_with("sffn") && p.name.ends_with(".w")) {
            let bound = 1.0 / (p.value.shape()[1] as f64).sqrt();
            p.value.data_mut().iter_mut().for_each(|v| *v = wrng.random_range(-bound..bound));
        }
        randomize_biases(&mut params, seed);
        let report = grad_check_params(
            |tape, bound| {
                let y = model.sffn_forward(tape, bound, tape.constant(x.clone())).unwrap();
                Ok(l1_to_random_target(tape, y, seed))
            },
            &params,
            3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {} at {}: {} vs {}", report.max_rel_error, report.worst_index, report.analytic[report.worst_index], report.numeric[report.worst_index]);
    }
}

#[test]
fn convtf_attention_normalises_at_every_site() {
    let model = toy_convtf(4, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..3 {
        let tape = Tape::new();
        let bound = model.params().bind_frozen(&tape);
        let xs = inputs(&tape, &mut rng, 4, 1, 6);
        let trace = model.run(&tape, &bound, &xs).unwrap();
        // encoder: 4 queries x 2 heads; decoder: 2 blocks x 2 heads
        assert_eq!(trace.attention.len(), 12);
        for &a in &trace.attention {
            let v = tape.value(a);
            let (n, px) = (v.shape()[0], 36);
            for p in 0..px {
                let s: f64 = (0..n).map(|i| v.data()[i * px + p]).sum();
                assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn convtf_gradient_reaches_every_input_slot() {
    let model = toy_convtf(4, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let tape = Tape::new();
    let bound = model.params().bind_frozen(&tape);
    let xs: Vec<Var> = (0..4).map(|_| tape.leaf(random_tensor(&mut rng, &[1, 6, 6], 1.0))).collect();
    let out = model.run(&tape, &bound, &xs).unwrap().output;
    let grads = tape.backward(l1_to_random_target(&tape, out, 17)).unwrap();
    for (i, &x) in xs.iter().enumerate() {
        assert!(grads.get(x).unwrap().max_abs() > 0.0, "slot {i} receives no gradient");
    }
}

#[test]
fn convtf_passes_gradient_checks() {
    for seed in [1, 2, 3] {
        let mut model = toy_convtf(3, seed);
        randomize_biases(model.params_mut(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let xs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[1, 6, 6], 1.0)).collect();
        let report = grad_check_params(
            |tape, bound| {
                let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
                let out = model.run(tape, bound, &vars).unwrap().output;
                Ok(l1_to_random_target(tape, out, seed))
            },
            model.params(),
            2,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {} at {}: {} vs {}", report.max_rel_error, report.worst_index, report.analytic[report.worst_index], report.numeric[report.worst_index]);
    }
}

#[test]
fn convtf_final_conv_head() {
    let settings = ModelSettings::defaults(ModelKind::ConvTf);
    let cfg = ConvTfConfig {
        head: Head::Conv,
        ..toy_convtf_config(2)
    };
    let model = ConvTf::with_config(ModelKind::ConvTf, &settings, cfg, InputScaling::identity(1.0), 3).unwrap();
    assert_eq!(model.head.len(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let bound = model.params().bind_frozen(&tape);
    let xs = inputs(&tape, &mut rng, 2, 1, 20);
    assert_eq!(tape.shape(model.run(&tape, &bound, &xs).unwrap().output), vec![1, 20, 20]);
}

#[test]
fn convtf_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let s = sample(3, &mut rng);
    assert_eq!(toy_convtf(3, 18).predict(&s).unwrap(), toy_convtf(3, 18).predict(&s).unwrap());
}

// ---- pricing layer and physics loss ---------------------------------------

fn random_vol_grid(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(&[1, GRID, GRID], |_| rng.random_range(lo..hi))
}

fn market(spot: f64, rate: f64) -> MarketMatrices {
    MarketMatrices::from_day(&KnotAxes::standard(), spot, rate)
}

/// Discounted lognormal payoff by composite Simpson in the normal variable.
fn quadrature_price(p: &MarketPoint) -> f64 {
    let sd = p.vol * p.tau.sqrt();
    let drift = (p.rate - 0.5 * p.vol * p.vol) * p.tau;
    let z0 = ((p.strike / p.spot).ln() - drift) / sd;
    let (a, b, n) = (z0, z0.max(0.0) + 12.0, 20_000);
    let h = (b - a) / n as f64;
    let f = |z: f64| (p.spot * (drift + sd * z).exp() - p.strike).max(0.0) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (-p.rate * p.tau).exp() * s * h / 3.0
}

#[test]
fn call_grid_matches_closed_form_and_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mm = market(3000.0, 0.02);
    let sigma = random_vol_grid(&mut rng, 0.05, 0.8);
    let tape = Tape::new();
    let grid = eval_call_grid(&tape, tape.constant(sigma.clone()), &mm).unwrap();
    let prices = tape.value(grid.price);
    assert_eq!(grid.clamped, 0);
    for c in 0..400 {
        let p = mm.point(c, sigma.data()[c]);
        let got = prices.data()[c];
        assert!((got - bs_price(&p).unwrap()).abs() < 1e-12 * p.spot.max(1.0), "cell {c}");
        assert!((got - quadrature_price(&p)).abs() < 1e-6, "cell {c}");
        assert!(got >= p.lower_bound() - 1e-9 && got <= p.spot);
    }
    assert_eq!(call_prices(sigma.data(), &mm).unwrap().len(), 400);
}

#[test]
fn call_grid_intrinsic_limit_and_clamp_counter() {
    let mm = market(100.0, 0.05);
    let mut sigma = Tensor::full(&[1, GRID, GRID], 1e-4);
    sigma.data_mut()[1] = -0.3;
    sigma.data_mut()[2] = 0.0;
    let tape = Tape::new();
    let grid = eval_call_grid(&tape, tape.constant(sigma), &mm).unwrap();
    assert_eq!(grid.clamped, 2);
    let prices = tape.value(grid.price);
    // Row 0 has moneyness 0.9: deep in the money at tiny vol.
    for c in 0..GRID {
        let p = mm.point(c, 1e-4);
        assert!((prices.data()[c] - (p.spot - p.strike * (-p.rate * p.tau).exp())).abs() < 1e-9);
    }
}

#[test]
fn pointwise_residual_vanishes_for_positive_vols() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for (spot, rate) in [(3000.0, 0.02), (100.0, 0.0), (4500.0, 0.08)] {
        for _ in 0..5 {
            let sigma = random_vol_grid(&mut rng, 0.01, 2.0);
            let tape = Tape::new();
            let (loss, _) = physics_loss(&tape, tape.constant(sigma), &market(spot, rate), DerivativeMode::PointwiseAnalytic).unwrap();
            assert!(tape.value(loss).item().unwrap() < 1e-8);
        }
    }
}

#[test]
fn grid_mode_penalises_smile_curvature() {
    let mm = market(3000.0, 0.02);
    let residual = |g: &VolSurfaceGrid| {
        let tape = Tape::new();
        let (loss, _) = physics_loss(&tape, tape.constant(g.to_tensor()), &mm, DerivativeMode::GridHomogeneity).unwrap();
        tape.value(loss).item().unwrap()
    };
    let flat = residual(&smile_grid(0, 0.2, 0.0));
    let curved = residual(&smile_grid(0, 0.2, 3.0));
    assert!(curved > 0.0 && curved > flat, "curved {curved} flat {flat}");
}

#[test]
fn piconvtf_loss_examples() {
    let mm = market(3000.0, 0.02);
    let truth = smile_grid(0, 0.2, 1.5);
    let tape = Tape::new();
    let cfg = PhysicsLossConfig {
        lambda: 5.0,
        mode: DerivativeMode::PointwiseAnalytic,
    };
    let (l, _) = piconvtf_loss(&tape, tape.constant(truth.to_tensor()), &truth, &mm, &cfg).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-8);

    let flat = VolSurfaceGrid::new(date(0), vec![0.2; 400], 3000.0, 0.02).unwrap();
    let pred = tape.constant(Tensor::full(&[1, GRID, GRID], 0.22));
    let zero = PhysicsLossConfig {
        lambda: 0.0,
        mode: DerivativeMode::GridHomogeneity,
    };
    let (l, _) = piconvtf_loss(&tape, pred, &flat, &mm, &zero).unwrap();
    assert!((tape.value(l).item().unwrap() - 0.02).abs() < 1e-15);
}

#[test]
fn zero_lambda_loss_equals_data_loss_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mm = market(3000.0, 0.02);
    let truth = smile_grid(0, 0.25, 1.0);
    for mode in [DerivativeMode::PointwiseAnalytic, DerivativeMode::GridHomogeneity] {
        let sigma = random_vol_grid(&mut rng, 0.1, 0.5);
        let tape = Tape::new();
        let pred = tape.constant(sigma.clone());
        let (l, _) = piconvtf_loss(&tape, pred, &truth, &mm, &PhysicsLossConfig { lambda: 0.0, mode }).unwrap();
        let data = sigma.data().iter().zip(&truth.values).map(|(p, t)| (p - t).abs()).sum::<f64>() / 400.0;
        let direct = tape.mean(tape.abs(tape.sub(pred, tape.constant(truth.to_tensor())).unwrap()));
        assert_eq!(tape.value(l).item().unwrap(), tape.value(direct).item().unwrap());
        assert!((tape.value(l).item().unwrap() - data).abs() < 1e-15);
    }
}

#[test]
fn physics_losses_pass_gradient_checks() {
    let mm = market(3000.0, 0.02);
    let truth = smile_grid(0, 0.2, 1.5);
    for mode in [DerivativeMode::PointwiseAnalytic, DerivativeMode::GridHomogeneity] {
        for seed in [1, 2, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point = random_vol_grid(&mut rng, 0.1, 0.6);
            let cfg = PhysicsLossConfig { lambda: 1.0, mode };
            let report = grad_check(
                |tape, s| Ok(piconvtf_loss(tape, s, &truth, &mm, &cfg).unwrap().0),
                &point,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{mode:?} seed {seed}: {}", report.max_rel_error);
        }
    }
}

#[test]
fn piconvtf_shares_convtf_parameters() {
    let settings = ModelSettings {
        hidden: 8,
        heads: 2,
        sffn_peak: 16,
        ..ModelSettings::defaults(ModelKind::PiConvTf)
    };
    let a = ConvTf::new(&settings, InputScaling::identity(3000.0), 3, 5).unwrap();
    let b = PiConvTf::new(&settings, InputScaling::identity(3000.0), 3, 5).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(b.kind(), ModelKind::PiConvTf);
    let bad = ModelSettings {
        lambda: -1.0,
        ..settings
    };
    assert!(PiConvTf::new(&bad, InputScaling::identity(3000.0), 3, 5).is_err());
}

// ---- PINN -----------------------------------------------------------------

fn toy_pinn(hidden: usize, seed: u64) -> Pinn {
    let settings = ModelSettings {
        hidden,
        ..ModelSettings::defaults(ModelKind::Pinn)
    };
    Pinn::new(&settings, InputScaling::identity(3000.0), seed).unwrap()
}

fn pinn_rows(rng: &mut ChaCha8Rng, b: usize) -> Tensor {
    Tensor::from_fn(&[b, 4], |k| match k % 4 {
        0 => rng.random_range(0.8..1.2),
        1 => rng.random_range(0.05..1.0),
        2 => rng.random_range(0.9..1.1),
        _ => rng.random_range(0.0..0.05),
    })
}

/// Price of the row with the spot moved to `s`, strike held fixed.
fn price_at_spot(model: &Pinn, row: &[f64], s: f64) -> f64 {
    let tape = Tape::new();
    let bound = model.params().bind_frozen(&tape);
    let x = Tensor::new(&[1, 4], vec![s, row[1], row[2] * row[0] / s, row[3]]).unwrap();
    let (c, _) = pinn_forward(&tape, &model.nets, &bound, tape.constant(x)).unwrap();
    tape.value(c).item().unwrap()
}

#[test]
fn pinn_shapes_and_positive_vol() {
    let model = toy_pinn(32, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let tape = Tape::new();
    let bound = model.params().bind_frozen(&tape);
    let x = tape.constant(Tensor::from_fn(&[17, 4], |_| rng.random_range(-50.0..50.0)));
    let (c, s) = pinn_forward(&tape, &model.nets, &bound, x).unwrap();
    assert_eq!((tape.shape(c), tape.shape(s)), (vec![17, 1], vec![17, 1]));
    assert!(tape.value(s).data().iter().all(|&v| v > 0.0));
    let bad = tape.constant(Tensor::zeros(&[3, 5]));
    assert!(pinn_forward(&tape, &model.nets, &bound, bad).is_err());
}

#[test]
fn pinn_with_zero_weights_is_constant() {
    let mut model = toy_pinn(16, 23);
    model.params_mut().iter_mut().for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let tape = Tape::new();
    let bound = model.params().bind_frozen(&tape);
    let (c, s) = pinn_forward(&tape, &model.nets, &bound, tape.constant(pinn_rows(&mut rng, 8))).unwrap();
    assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(s).data().iter().all(|&v| (v - 2f64.ln()).abs() < 1e-15));
}

#[test]
fn pinn_spot_derivatives_match_finite_differences() {
    let model = toy_pinn(24, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = pinn_rows(&mut rng, 6);
    let tape = Tape::new();
    let bound = model.params().bind_frozen(&tape);
    let out = pinn_outputs(&tape, &model.nets, &bound, tape.leaf(x.clone())).unwrap();
    let (c_s, c_ss, c_tau) = (tape.value(out.c_s), tape.value(out.c_ss), tape.value(out.c_tau));
    for (i, row) in x.data().chunks(4).enumerate() {
        let s = row[0];
        let h = 1e-4;
        let (up, mid, dn) = (price_at_spot(&model, row, s + h), price_at_spot(&model, row, s), price_at_spot(&model, row, s - h));
        let d1 = (up - dn) / (2.0 * h);
        let d2 = (up - 2.0 * mid + dn) / (h * h);
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        assert!(rel(c_s.data()[i], d1) < 1e-4, "row {i}: {} vs {d1}", c_s.data()[i]);
        assert!(rel(c_ss.data()[i], d2) < 1e-3, "row {i}: {} vs {d2}", c_ss.data()[i]);

        let mut t_up = row.to_vec();
        t_up[1] += 1e-5;
        let mut t_dn = row.to_vec();
        t_dn[1] -= 1e-5;
        let at = |r: &[f64]| price_at_spot(&model, r, r[0]);
        assert!(rel(c_tau.data()[i], (at(&t_up) - at(&t_dn)) / 2e-5) < 1e-4);
    }
}

#[test]
fn pinn_input_gradient_matches_finite_differences() {
    let model = toy_pinn(24, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x = pinn_rows(&mut rng, 5);
    let report = grad_check(
        |tape, x| {
            let bound = model.params().bind_frozen(tape);
            let (c, _) = pinn_forward(tape, &model.nets, &bound, x).unwrap();
            Ok(tape.sum(c))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_error);
}

/// Closed-form price of each row in units of the reference spot.
fn closed_form_price(tape: &Tape, x: Var, sigma: f64) -> Var {
    let col = |j| tape.slice(x, 1, j, 1).unwrap();
    let (s, tau, m, r) = (col(0), col(1), col(2), col(3));
    let sd = tape.scale(tape.sqrt(tau), sigma);
    let drift = tape.mul(tape.offset(r, 0.5 * sigma * sigma), tau).unwrap();
    let d1 = tape.div(tape.sub(drift, tape.ln(m)).unwrap(), sd).unwrap();
    let d2 = tape.sub(d1, sd).unwrap();
    let k = tape.mul(m, s).unwrap();
    let disc = tape.exp(tape.neg(tape.mul(r, tau).unwrap()));
    let long = tape.mul(s, tape.norm_cdf(d1)).unwrap();
    let short = tape.mul(tape.mul(k, disc).unwrap(), tape.norm_cdf(d2)).unwrap();
    tape.sub(long, short).unwrap()
}

#[test]
fn pinn_loss_vanishes_on_the_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let x = pinn_rows(&mut rng, 64);
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let c = closed_form_price(&tape, xv, 0.3);
    let (c_tau, c_s, c_ss) = price_derivatives(&tape, c, xv).unwrap();
    let out = PinnOutputs {
        c,
        c_tau,
        c_s,
        c_ss,
        sigma: tape.constant(Tensor::full(&[64, 1], 0.3)),
    };
    let loss = pinn_loss(&tape, &out, &x, &[0.3; 64]).unwrap();
    assert!(tape.value(loss).item().unwrap() < 1e-6);
}

#[test]
fn pinn_loss_hand_example_and_permutation_invariance() {
    let tape = Tape::new();
    let zero = tape.constant(Tensor::zeros(&[2, 1]));
    let out = PinnOutputs {
        c: zero,
        c_tau: zero,
        c_s: zero,
        c_ss: zero,
        sigma: tape.constant(Tensor::new(&[2, 1], vec![0.2, 0.3]).unwrap()),
    };
    let x = Tensor::new(&[2, 4], vec![1.0, 0.5, 1.0, 0.01, 1.1, 0.2, 0.95, 0.01]).unwrap();
    let l = pinn_loss(&tape, &out, &x, &[0.25, 0.25]).unwrap();
    assert!((tape.value(l).item().unwrap() - 0.05).abs() < 1e-15);

    let model = toy_pinn(16, 27);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let x = pinn_rows(&mut rng, 10);
    let truth: Vec<f64> = (0..10).map(|_| rng.random_range(0.1..0.4)).collect();
    let eval = |x: &Tensor, truth: &[f64]| {
        let tape = Tape::new();
        let bound = model.params().bind_frozen(&tape);
        let out = pinn_outputs(&tape, &model.nets, &bound, tape.leaf(x.clone())).unwrap();
        tape.value(pinn_loss(&tape, &out, x, truth).unwrap()).item().unwrap()
    };
    let perm: Vec<usize> = (0..10).rev().collect();
    let px = Tensor::from_fn(&[10, 4], |k| x.data()[perm[k / 4] * 4 + k % 4]);
    let pt: Vec<f64> = perm.iter().map(|&i| truth[i]).collect();
    assert!((eval(&x, &truth) - eval(&px, &pt)).abs() < 1e-14);
}

#[test]
fn pinn_nets_pass_gradient_checks() {
    for seed in [1, 2, 3] {
        let model = toy_pinn(6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = pinn_rows(&mut rng, 8);
        let truth: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..0.4)).collect();
        let report = grad_check_params(
            |tape, bound| {
                let out = pinn_outputs(tape, &model.nets, bound, tape.leaf(x.clone())).unwrap();
                Ok(pinn_loss(tape, &out, &x, &truth).unwrap())
            },
            model.params(),
            6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {} at {}: {} vs {}", report.max_rel_error, report.worst_index, report.analytic[report.worst_index], report.numeric[report.worst_index]);
    }
}

// ---- all models -----------------------------------------------------------

#[test]
fn every_model_maps_ten_days_to_one_grid_at_default_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let s = sample(10, &mut rng);
    for kind in ModelKind::ALL {
        let model = build_model(kind, &ModelSettings::defaults(kind), InputScaling::identity(3000.0), 10, 1).unwrap();
        let pred = model.predict(&s).unwrap();
        assert_eq!(pred.len(), 400, "{kind}");
        assert!(pred.iter().all(|v| v.is_finite()), "{kind}");
    }
}

#[test]
fn model_kind_names_round_trip() {
    for kind in ModelKind::ALL {
        assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
    }
    assert!("lstm".parse::<ModelKind>().is_err());
}
