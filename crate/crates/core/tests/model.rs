//! Forward oracles, structural invariants and an end-to-end gradient check
//! for the forecasting network.

use multitoken_core::model::{msa, Attention, Block, Bound, Mode, Model, ParamStore, Path};
use multitoken_core::training::mse_loss;
use multitoken_core::{AblationFlags, ModelConfig, Series, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro(flags: AblationFlags) -> ModelConfig {
    ModelConfig {
        context: 32,
        horizon: 8,
        d_model: 8,
        heads: 2,
        rho: 16,
        layers: 1,
        dropout: 0.0,
        periods: vec![8],
        ablation: flags,
    }
}

fn random_series(rng: &mut ChaCha8Rng, m: usize, l: usize) -> Series {
    Series::new(m, l, (0..m * l).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, fan_out: usize) -> Vec<f64> {
    let fan_in = x.len();
    (0..fan_out)
        .map(|j| {
            (0..fan_in).map(|i| x[i] * w[i * fan_out + j]).sum::<f64>() + b.map_or(0.0, |b| b[j])
        })
        .collect()
}

fn layernorm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(a, (g, b))| (a - m) / (v + 1e-5).sqrt() * g + b)
        .collect()
}

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

struct Lin<'a>(&'a ParamStore<f64>, &'a multitoken_core::model::Linear);

impl Lin<'_> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let w = self.0.get(self.1.weight).data();
        let b = self.1.bias.map(|b| self.0.get(b).data());
        linear(x, w, b, self.1.fan_out)
    }
}

/// Token-by-token attention with explicit head loops.
fn msa_oracle(
    p: &ParamStore<f64>,
    a: &Attention,
    q: &[Vec<f64>],
    kv: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let d = q[0].len();
    let dh = d / a.heads;
    let qs: Vec<Vec<f64>> = q.iter().map(|t| Lin(p, &a.query).apply(t)).collect();
    let ks: Vec<Vec<f64>> = kv.iter().map(|t| Lin(p, &a.key).apply(t)).collect();
    let vs: Vec<Vec<f64>> = kv.iter().map(|t| Lin(p, &a.value).apply(t)).collect();
    qs.iter()
        .map(|qt| {
            let mut ctx = vec![0.0; d];
            for h in 0..a.heads {
                let r = h * dh..(h + 1) * dh;
                let s: Vec<f64> = ks
                    .iter()
                    .map(|k| r.clone().map(|i| qt[i] * k[i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, v) in e.iter().zip(&vs) {
                    for i in r.clone() {
                        ctx[i] += w / z * v[i];
                    }
                }
            }
            Lin(p, &a.output).apply(&ctx)
        })
        .collect()
}

fn block_oracle(p: &ParamStore<f64>, b: &Block, q: &[Vec<f64>], kv: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let a = msa_oracle(p, &b.attn, q, kv);
    q.iter()
        .zip(a)
        .map(|(qt, at)| {
            let r: Vec<f64> = qt.iter().zip(&at).map(|(x, y)| x + y).collect();
            let x = layernorm(
                &r,
                p.get(b.attn_norm.gain).data(),
                p.get(b.attn_norm.bias).data(),
            );
            let h: Vec<f64> = Lin(p, &b.mlp.up)
                .apply(&x)
                .into_iter()
                .map(gelu_tanh)
                .collect();
            let m = Lin(p, &b.mlp.down).apply(&h);
            let y: Vec<f64> = x.iter().zip(&m).map(|(a, b)| a + b).collect();
            layernorm(
                &y,
                p.get(b.mlp_norm.gain).data(),
                p.get(b.mlp_norm.bias).data(),
            )
        })
        .collect()
}

fn tokens(t: &Tensor<f64>, n: usize) -> Vec<Vec<f64>> {
    let w = t.shape()[2];
    t.data()[n * t.shape()[1] * w..(n + 1) * t.shape()[1] * w]
        .chunks(w)
        .map(<[f64]>::to_vec)
        .collect()
}

#[test]
fn msa_and_block_match_token_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::default();
    let block = Block::new(&mut store, "b", 8, 2, &mut rng);
    let q = Tensor::from_fn(vec![2, 5, 8], |_| rng.gen_range(-1.0..1.0));
    let kv = Tensor::from_fn(vec![2, 3, 8], |_| rng.gen_range(-1.0..1.0));
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let (vq, vkv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
    let attn = msa(&mut tape, &p, &block.attn, vq, vkv).unwrap();
    let out = block
        .forward(&mut tape, &p, vq, vkv, &mut Mode::Eval)
        .unwrap();
    for n in 0..2 {
        let want_a = msa_oracle(&store, &block.attn, &tokens(&q, n), &tokens(&kv, n));
        let want_b = block_oracle(&store, &block, &tokens(&q, n), &tokens(&kv, n));
        for (got, want) in [
            (tokens(tape.value(attn), n), want_a),
            (tokens(tape.value(out), n), want_b),
        ] {
            for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
                assert!((g - w).abs() < 1e-10, "{g} vs {w}");
            }
        }
    }
}

#[test]
fn embedding_matches_fold_formula() {
    let model = Model::<f64>::build(micro(AblationFlags::default()), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let branch = &model.branches[0];
    let (n, tau) = (branch.periods, branch.spec.tau);
    let grid = Tensor::from_fn(vec![1, n, tau], |_| rng.gen_range(-1.0..1.0));
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let x = tape.constant(grid.clone());
    let (sigma, mu) = branch.embed(&mut tape, &p, x).unwrap();
    let s = grid.data();
    let w_intra = model.params.get(branch.phase_embed.weight).data();
    let w_inter = model.params.get(branch.period_embed.weight).data();
    let pos1 = model.params.get(branch.phase_pos).data();
    let pos2 = model.params.get(branch.period_pos).data();
    let d = 8;
    // sigma[phase] = sum_row S[row, phase] W_intra[row, :] + pos1[phase]
    for ph in 0..tau {
        for k in 0..d {
            let want: f64 = (0..n)
                .map(|r| s[r * tau + ph] * w_intra[r * d + k])
                .sum::<f64>()
                + pos1[ph];
            assert!((tape.value(sigma).at(&[0, ph, k]) - want).abs() < 1e-12);
        }
    }
    for r in 0..n {
        for k in 0..d {
            let want: f64 = (0..tau)
                .map(|ph| s[r * tau + ph] * w_inter[ph * d + k])
                .sum::<f64>()
                + pos2[r];
            assert!((tape.value(mu).at(&[0, r, k]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn encoding_has_tau_plus_n_tokens_and_prediction_is_m_by_h() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Model::<f32>::build(micro(AblationFlags::default()), 1).unwrap();
    let x = random_series(&mut rng, 3, 32);
    let inputs = model.prepare(std::slice::from_ref(&x)).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    for (input, b) in inputs.into_iter().zip(&model.branches) {
        let v = tape.constant(input);
        let (s, m) = b.embed(&mut tape, &p, v).unwrap();
        let z = b
            .encode(&mut tape, &p, s, m, &model.config.ablation, &mut Mode::Eval)
            .unwrap();
        assert_eq!(tape.shape(z), &[3, b.spec.tau + b.periods, 8]);
    }
    let fc = model.forecast(&x).unwrap();
    assert_eq!((fc.prediction.channels(), fc.prediction.len()), (3, 8));
}

#[test]
fn prediction_is_sum_of_contributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = ModelConfig {
        context: 96,
        horizon: 24,
        d_model: 16,
        heads: 4,
        periods: vec![24, 12],
        ..ModelConfig::default()
    };
    let model = Model::<f32>::build(cfg, 2).unwrap();
    let fc = model.forecast(&random_series(&mut rng, 4, 96)).unwrap();
    assert_eq!(fc.branch_contributions.len(), 3);
    for c in 0..4 {
        for t in 0..24 {
            let s: f64 = fc
                .branch_contributions
                .iter()
                .map(|b| b.channel(c)[t])
                .sum();
            assert!((s - fc.prediction.channel(c)[t]).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_input_gives_finite_channel_shared_output() {
    let model = Model::<f32>::build(micro(AblationFlags::default()), 8).unwrap();
    let fc = model.forecast(&Series::zeros(3, 32)).unwrap();
    assert!(fc.prediction.data().iter().all(|v| v.is_finite()));
    assert_eq!(fc.prediction.channel(0), fc.prediction.channel(2));
}

#[test]
fn permuting_channels_permutes_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = Model::<f64>::build(micro(AblationFlags::default()), 3).unwrap();
    let x = random_series(&mut rng, 4, 32);
    let perm = [2, 0, 3, 1];
    let rows: Vec<Vec<f64>> = perm.iter().map(|&c| x.channel(c).to_vec()).collect();
    let a = model.forecast(&x).unwrap().prediction;
    let b = model
        .forecast(&Series::from_channels(&rows).unwrap())
        .unwrap()
        .prediction;
    for (i, &c) in perm.iter().enumerate() {
        for (u, v) in b.channel(i).iter().zip(a.channel(c)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

fn loss_and_grads(model: &Model<f64>, x: &Series, y: &Tensor<f64>) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let p: Bound = model.params.bind(&mut tape);
    let out = model
        .forward_batch(&mut tape, &p, std::slice::from_ref(x), &mut Mode::Eval)
        .unwrap();
    let t = tape.constant(y.clone());
    let loss = mse_loss(&mut tape, out.prediction, t).unwrap();
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss).unwrap();
    let g = model
        .params
        .iter()
        .map(|(id, _, _)| grads.get(p.var(id)).unwrap().to_vec())
        .collect();
    (value, g)
}

fn loss_only(model: &Model<f64>, x: &Series, y: &Tensor<f64>) -> f64 {
    let pred = model.predict_batch(std::slice::from_ref(x)).unwrap();
    pred.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.numel() as f64
}

#[test]
#[allow(clippy::needless_range_loop)]
fn end_to_end_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = Model::<f64>::build(micro(AblationFlags::default()), 11).unwrap();
    let x = random_series(&mut rng, 2, 32);
    let y = Tensor::from_fn(vec![1, 2, 8], |_| rng.gen_range(-1.0..1.0));
    let (_, analytic) = loss_and_grads(&model, &x, &y);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = model.params.iter().map(|(id, _, _)| id).collect();
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..model.params.get(id).numel() {
            let mut plus = model.clone();
            plus.params.get_mut(id).data_mut()[i] += eps;
            let mut minus = model.clone();
            minus.params.get_mut(id).data_mut()[i] -= eps;
            let n = (loss_only(&plus, &x, &y) - loss_only(&minus, &x, &y)) / (2.0 * eps);
            let a = analytic[k][i];
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            worst = worst.max(err);
            assert!(
                err < 1e-4,
                "{}[{i}]: analytic {a} numeric {n}",
                model.params.name(id)
            );
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn disabled_paths_receive_exactly_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = random_series(&mut rng, 2, 32);
    let y = Tensor::from_fn(vec![1, 2, 8], |_| rng.gen_range(-1.0..1.0));
    let rows = [
        AblationFlags::new(true, true, true, true),
        AblationFlags::new(false, true, true, true),
        AblationFlags::new(false, true, true, false),
        AblationFlags::new(false, true, false, false),
        AblationFlags::new(false, false, true, false),
        AblationFlags::new(true, true, false, false),
    ];
    for flags in rows {
        let model = Model::<f64>::build(micro(flags), 4).unwrap();
        let (_, grads) = loss_and_grads(&model, &x, &y);
        let index: Vec<_> = model.params.iter().map(|(id, _, _)| id).collect();
        let grad_of = |id| &grads[index.iter().position(|&j| j == id).unwrap()];
        for (path, on) in [
            (Path::Intra, flags.use_intra),
            (Path::Inter, flags.use_inter),
            (Path::Cross, flags.use_cross),
        ] {
            let ids = model.path_params(path);
            let any_nonzero = ids.iter().any(|&id| grad_of(id).iter().any(|&g| g != 0.0));
            if on {
                assert!(any_nonzero, "{flags:?}: {path:?} enabled but untouched");
            } else {
                for &id in &ids {
                    assert!(
                        grad_of(id).iter().all(|&g| g == 0.0),
                        "{flags:?}: {}",
                        model.params.name(id)
                    );
                }
            }
        }
        assert_eq!(model.branches.len(), if flags.use_mpsd { 2 } else { 1 });
    }
}

#[test]
fn cross_without_both_streams_is_rejected() {
    assert!(Model::<f32>::build(micro(AblationFlags::new(true, true, false, true)), 0).is_err());
    assert!(Model::<f32>::build(micro(AblationFlags::new(true, false, false, false)), 0).is_err());
}

#[test]
fn raw_branch_uses_strongest_period() {
    let cfg = ModelConfig {
        periods: vec![8, 4],
        ..micro(AblationFlags::new(false, true, true, true))
    };
    let model = Model::<f32>::build(cfg, 0).unwrap();
    assert_eq!(model.specs.len(), 1);
    let s = model.specs[0];
    assert_eq!((s.iota, s.tau, s.eta), (32, 8, 8));
}

#[test]
fn checkpoint_roundtrip_preserves_forecast() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let model = Model::<f32>::build(micro(AblationFlags::default()), 17).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    multitoken_core::model::save(&model, &path).unwrap();
    let back: Model<f32> = multitoken_core::model::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    let x = random_series(&mut rng, 2, 32);
    assert_eq!(
        model.forecast(&x).unwrap().prediction,
        back.forecast(&x).unwrap().prediction
    );
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(multitoken_core::model::load::<f32>(&path).is_err());
}
