use dft_core::layers::{ChannelMix, FfnBlock, MultiHeadAttention, RwkvStack, TimeMix};
use dft_core::tensor::{
    finite_difference_gradcheck, sample_coordinates, wkv_streaming, Graph, ParamId, ParamStore, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

fn set(store: &mut ParamStore, id: ParamId, f: impl Fn(usize) -> f64) {
    let shape = store.value(id).shape().to_vec();
    store.set_value(id, Tensor::from_fn(&shape, f)).unwrap();
}

/// `[rows×k]·[k×n]` on plain slices.
fn mm(a: &[f64], b: &[f64], rows: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for i in 0..rows {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn randomize_all(store: &mut ParamStore, r: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, random(&shape, r, scale)).unwrap();
    }
}

// ---------------------------------------------------------------- FFN

#[test]
fn ffn_zero_weights_pass_input_through() {
    let mut store = ParamStore::new();
    let ffn = FfnBlock::new(&mut store, &mut rng(0), "ffn", 4, 8).unwrap();
    for id in [ffn.fc1.weight, ffn.fc2.weight] {
        set(&mut store, id, |_| 0.0);
    }
    let g = Graph::new();
    let x = random(&[3, 4], &mut rng(1), 1.0);
    let y = ffn.forward(&g, &store, g.constant(x.clone())).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn ffn_identity_weights_double_nonnegative_input() {
    let mut store = ParamStore::new();
    let ffn = FfnBlock::new(&mut store, &mut rng(0), "ffn", 3, 3).unwrap();
    for id in [ffn.fc1.weight, ffn.fc2.weight] {
        set(&mut store, id, |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    }
    let g = Graph::new();
    let x = Tensor::new(&[2, 3], vec![0.0, 1.0, 2.5, 3.0, 0.25, 7.0]).unwrap();
    let y = ffn.forward(&g, &store, g.constant(x.clone())).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn ffn_matches_hand_composition() {
    let mut store = ParamStore::new();
    let mut r = rng(2);
    let ffn = FfnBlock::new(&mut store, &mut r, "ffn", 4, 6).unwrap();
    randomize_all(&mut store, &mut r, 1.0);
    let x = random(&[5, 4], &mut r, 1.0);
    let g = Graph::new();
    let y = g.value(ffn.forward(&g, &store, g.constant(x.clone())).unwrap());

    let w1 = store.value(ffn.fc1.weight).data();
    let b1 = store.value(ffn.fc1.bias.unwrap()).data();
    let w2 = store.value(ffn.fc2.weight).data();
    let b2 = store.value(ffn.fc2.bias.unwrap()).data();
    let mut h = mm(x.data(), w1, 5, 4, 6);
    for (i, v) in h.iter_mut().enumerate() {
        *v = (*v + b1[i % 6]).max(0.0);
    }
    let o = mm(&h, w2, 5, 6, 4);
    for i in 0..20 {
        let expected = x.data()[i] + o[i] + b2[i % 4];
        assert!((y.data()[i] - expected).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- attention

fn naive_attention(store: &ParamStore, mha: &MultiHeadAttention, x: &[f64], s: usize) -> Vec<f64> {
    let d = mha.dim;
    let dh = d / mha.heads;
    let q = mm(x, store.value(mha.w_q.weight).data(), s, d, d);
    let k = mm(x, store.value(mha.w_k.weight).data(), s, d, d);
    let v = mm(x, store.value(mha.w_v.weight).data(), s, d, d);
    let mut concat = vec![0.0; s * d];
    for h in 0..mha.heads {
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| {
                    (0..dh)
                        .map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..s {
                for c in 0..dh {
                    concat[i * d + h * dh + c] += exps[j] / total * v[j * d + h * dh + c];
                }
            }
        }
    }
    mm(&concat, store.value(mha.w_o.weight).data(), s, d, d)
}

#[test]
fn attention_with_zero_queries_is_uniform() {
    let mut store = ParamStore::new();
    let mut r = rng(3);
    let mha = MultiHeadAttention::new(&mut store, &mut r, "sc", 8, 2).unwrap();
    set(&mut store, mha.w_q.weight, |_| 0.0);
    set(&mut store, mha.w_k.weight, |_| 0.0);
    let x = random(&[1, 5, 8], &mut r, 1.0);
    let g = Graph::new();
    let (out, weights) = mha.forward_with_weights(&g, &store, g.constant(x.clone())).unwrap();
    assert!(g.value(weights).data().iter().all(|&w| (w - 0.2).abs() < 1e-15));

    let v = mm(x.data(), store.value(mha.w_v.weight).data(), 5, 8, 8);
    let mean: Vec<f64> = (0..8)
        .map(|c| (0..5).map(|i| v[i * 8 + c]).sum::<f64>() / 5.0)
        .collect();
    let expected = mm(&mean, store.value(mha.w_o.weight).data(), 1, 8, 8);
    let out = g.value(out);
    for i in 0..5 {
        for c in 0..8 {
            assert!((out.at(&[0, i, c]) - expected[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_single_stock_weight_is_one() {
    let mut store = ParamStore::new();
    let mut r = rng(4);
    let mha = MultiHeadAttention::new(&mut store, &mut r, "sc", 4, 2).unwrap();
    let x = random(&[3, 1, 4], &mut r, 1.0);
    let g = Graph::new();
    let (out, weights) = mha.forward_with_weights(&g, &store, g.constant(x.clone())).unwrap();
    assert!(g.value(weights).data().iter().all(|&w| w == 1.0));
    let v = mm(x.data(), store.value(mha.w_v.weight).data(), 3, 4, 4);
    let expected = mm(&v, store.value(mha.w_o.weight).data(), 3, 4, 4);
    for (a, b) in g.value(out).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_naive_oracle() {
    let mut store = ParamStore::new();
    let mut r = rng(5);
    let mha = MultiHeadAttention::new(&mut store, &mut r, "sc", 8, 2).unwrap();
    let x = random(&[1, 4, 8], &mut r, 1.0);
    let g = Graph::new();
    let out = g.value(mha.forward(&g, &store, g.constant(x.clone())).unwrap());
    for (a, b) in out.data().iter().zip(naive_attention(&store, &mha, x.data(), 4)) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn attention_rejects_empty_universe_and_bad_heads() {
    let mut store = ParamStore::new();
    assert!(MultiHeadAttention::new(&mut store, &mut rng(0), "bad", 6, 4).is_err());
    let mha = MultiHeadAttention::new(&mut store, &mut rng(0), "sc", 4, 2).unwrap();
    let g = Graph::new();
    assert!(mha.forward(&g, &store, g.constant(Tensor::zeros(&[2, 0, 4]))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_rows_sum_to_one_and_are_permutation_equivariant(seed in any::<u64>(), s in 2usize..7) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut r, "sc", 8, 4).unwrap();
        let x = random(&[2, s, 8], &mut r, 2.0);
        let mut perm: Vec<usize> = (0..s).collect();
        for i in (1..s).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permuted = Tensor::from_fn(&[2, s, 8], |idx| {
            let (b, i, c) = (idx / (s * 8), (idx / 8) % s, idx % 8);
            x.at(&[b, perm[i], c])
        });
        let g = Graph::new();
        let (out, weights) = mha.forward_with_weights(&g, &store, g.constant(x)).unwrap();
        let out_p = g.value(mha.forward(&g, &store, g.constant(permuted)).unwrap());
        let weights = g.value(weights);
        for row in weights.data().chunks(s) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let out = g.value(out);
        for b in 0..2 {
            for i in 0..s {
                for c in 0..8 {
                    prop_assert!((out_p.at(&[b, i, c]) - out.at(&[b, perm[i], c])).abs() < 1e-12);
                }
            }
        }
    }
}

// ---------------------------------------------------------------- wkv / time mix

/// The literal double-sum form, no normalization. `decay = exp(w_raw)`.
fn wkv_literal(k: &[f64], v: &[f64], decay: &[f64], bonus: &[f64], steps: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; steps * d];
    for c in 0..d {
        for t in 0..steps {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..t {
                let e = (-((t - 1 - i) as f64) * decay[c] + k[i * d + c]).exp();
                num += e * v[i * d + c];
                den += e;
            }
            let e = (bonus[c] + k[t * d + c]).exp();
            num += e * v[t * d + c];
            den += e;
            out[t * d + c] = num / den;
        }
    }
    out
}

#[test]
fn wkv_single_step_returns_value() {
    let v = [0.123456789, -3.5];
    let out = wkv_streaming(&[7.0, -4.0], &v, &[1.0, 0.2], &[0.3, -0.1], 1, 1, 2);
    assert_eq!(out, v);
}

#[test]
fn wkv_without_decay_averages_uniformly() {
    // w_raw → −∞ gives a decay rate of 0.
    let decay = [(-60f64).exp()];
    let out = wkv_streaming(&[0.0, 0.0], &[1.0, 4.0], &decay, &[0.0], 1, 2, 1);
    assert!((out[1] - 2.5).abs() < 1e-15);
}

#[test]
fn wkv_streaming_matches_literal_formula() {
    let mut r = rng(6);
    for case in 0..50 {
        let kscale = if case % 2 == 0 { 1.0 } else { 20.0 };
        let k = random(&[8, 4], &mut r, kscale);
        let v = random(&[8, 4], &mut r, 1.0);
        let decay: Vec<f64> = (0..4).map(|_| r.random_range(-3.0f64..1.5).exp()).collect();
        let bonus: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let fast = wkv_streaming(k.data(), v.data(), &decay, &bonus, 1, 8, 4);
        let slow = wkv_literal(k.data(), v.data(), &decay, &bonus, 8, 4);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn time_mix_matches_composition() {
    let mut store = ParamStore::new();
    let mut r = rng(7);
    let tm = TimeMix::new(&mut store, &mut r, "tm", 4).unwrap();
    randomize_all(&mut store, &mut r, 0.8);
    let (t, d) = (6, 4);
    let x = random(&[1, t, d], &mut r, 1.0);
    let g = Graph::new();
    let y = g.value(tm.forward(&g, &store, g.constant(x.clone())).unwrap());

    let xs = x.data();
    let shifted = |mu: ParamId| {
        let mu = store.value(mu).data();
        (0..t * d)
            .map(|i| {
                let prev = if i >= d { xs[i - d] } else { 0.0 };
                mu[i % d] * xs[i] + (1.0 - mu[i % d]) * prev
            })
            .collect::<Vec<_>>()
    };
    let rr = mm(&shifted(tm.mu_r), store.value(tm.w_r.weight).data(), t, d, d);
    let kk = mm(&shifted(tm.mu_k), store.value(tm.w_k.weight).data(), t, d, d);
    let vv = mm(&shifted(tm.mu_v), store.value(tm.w_v.weight).data(), t, d, d);
    let decay: Vec<f64> = store.value(tm.w).data().iter().map(|w| w.exp()).collect();
    let wkv = wkv_literal(&kk, &vv, &decay, store.value(tm.u).data(), t, d);
    let gated: Vec<f64> = rr.iter().zip(&wkv).map(|(a, b)| sig(*a) * b).collect();
    let expected = mm(&gated, store.value(tm.w_out.weight).data(), t, d, d);
    for (a, b) in y.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-10);
    }
}

// ---------------------------------------------------------------- channel mix

fn channel_mix_oracle(store: &ParamStore, cm: &ChannelMix, x: &[f64], t: usize) -> Vec<f64> {
    let d = cm.dim;
    let h = cm.w_k.out_dim;
    let shifted = |mu: ParamId| {
        let mu = store.value(mu).data();
        (0..t * d)
            .map(|i| {
                let prev = if i >= d { x[i - d] } else { 0.0 };
                mu[i % d] * x[i] + (1.0 - mu[i % d]) * prev
            })
            .collect::<Vec<_>>()
    };
    let r = mm(&shifted(cm.mu_r), store.value(cm.w_r.weight).data(), t, d, d);
    let k: Vec<f64> = mm(&shifted(cm.mu_k), store.value(cm.w_k.weight).data(), t, d, h)
        .into_iter()
        .map(|v| v.max(0.0).powi(2))
        .collect();
    let v = mm(&k, store.value(cm.w_v.weight).data(), t, h, d);
    r.iter().zip(&v).map(|(a, b)| sig(*a) * b).collect()
}

#[test]
fn channel_mix_zero_weights_give_zero() {
    let mut store = ParamStore::new();
    let cm = ChannelMix::new(&mut store, &mut rng(8), "cm", 4, 16).unwrap();
    for id in [cm.w_r.weight, cm.w_k.weight, cm.w_v.weight] {
        set(&mut store, id, |_| 0.0);
    }
    let g = Graph::new();
    let y = cm
        .forward(&g, &store, g.constant(random(&[2, 5, 4], &mut rng(9), 1.0)))
        .unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn channel_mix_saturated_gate_traces_squared_relu_path() {
    let mut store = ParamStore::new();
    let cm = ChannelMix::new(&mut store, &mut rng(10), "cm", 2, 2).unwrap();
    set(&mut store, cm.mu_r, |_| 1.0);
    set(&mut store, cm.mu_k, |_| 1.0);
    set(&mut store, cm.w_r.weight, |_| 100.0);
    set(&mut store, cm.w_k.weight, |i| [1.0, 0.0, 0.0, -1.0][i]);
    set(&mut store, cm.w_v.weight, |i| [1.0, 0.0, 0.0, 1.0][i]);
    let x = Tensor::new(&[1, 3, 2], vec![0.5, 0.5, 2.0, 2.0, 3.0, 3.0]).unwrap();
    let g = Graph::new();
    let y = g.value(cm.forward(&g, &store, g.constant(x)).unwrap());
    // K′ = (x, −x), so relu(K′)² = (x², 0) and the gate is ~1.
    for (t, xv) in [0.5f64, 2.0, 3.0].iter().enumerate() {
        assert!((y.at(&[0, t, 0]) - xv * xv).abs() < 1e-12);
        assert_eq!(y.at(&[0, t, 1]), 0.0);
    }
}

#[test]
fn channel_mix_matches_composition() {
    let mut store = ParamStore::new();
    let mut r = rng(11);
    let cm = ChannelMix::new(&mut store, &mut r, "cm", 4, 16).unwrap();
    randomize_all(&mut store, &mut r, 1.0);
    let x = random(&[1, 7, 4], &mut r, 1.0);
    let g = Graph::new();
    let y = g.value(cm.forward(&g, &store, g.constant(x.clone())).unwrap());
    for (a, b) in y.data().iter().zip(channel_mix_oracle(&store, &cm, x.data(), 7)) {
        assert!((a - b).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- stacks

#[test]
fn rwkv_with_no_layers_is_identity() {
    let mut store = ParamStore::new();
    let stack = RwkvStack::new(&mut store, &mut rng(0), "tc", 4, 16, 0).unwrap();
    let g = Graph::new();
    let x = random(&[8, 4], &mut rng(1), 1.0);
    let y = stack.forward(&g, &store, g.constant(x.clone())).unwrap();
    assert_eq!(*g.value(y), x);
}

#[test]
fn two_layer_stack_equals_sequential_blocks() {
    let mut store = ParamStore::new();
    let mut r = rng(12);
    let stack = RwkvStack::new(&mut store, &mut r, "tc", 4, 16, 2).unwrap();
    randomize_all(&mut store, &mut r, 0.5);
    let x = random(&[3, 8, 4], &mut r, 1.0);
    let g = Graph::new();
    let whole = g.value(stack.forward(&g, &store, g.constant(x.clone())).unwrap());
    let h = stack.blocks[0].forward(&g, &store, g.constant(x)).unwrap();
    let h = g.constant((*g.value(h)).clone());
    let piecewise = g.value(stack.blocks[1].forward(&g, &store, h).unwrap());
    assert_eq!(whole.data(), piecewise.data());
}

#[test]
fn rwkv_is_causal() {
    let mut store = ParamStore::new();
    let mut r = rng(13);
    let stack = RwkvStack::new(&mut store, &mut r, "tc", 4, 16, 2).unwrap();
    randomize_all(&mut store, &mut r, 0.7);
    let (t, d) = (8, 4);
    let x = random(&[2, t, d], &mut r, 1.0);
    let g = Graph::new();
    let base = g.value(stack.forward(&g, &store, g.constant(x.clone())).unwrap());
    for t0 in 0..t {
        let mut p = x.clone();
        for b in 0..2 {
            for s in t0..t {
                for c in 0..d {
                    p.data_mut()[(b * t + s) * d + c] += r.random_range(-5.0..5.0);
                }
            }
        }
        let out = g.value(stack.forward(&g, &store, g.constant(p)).unwrap());
        for b in 0..2 {
            for s in 0..t0 {
                for c in 0..d {
                    assert_eq!(out.at(&[b, s, c]).to_bits(), base.at(&[b, s, c]).to_bits());
                }
            }
        }
    }
}

// ---------------------------------------------------------------- gradients

fn gradcheck_layer(
    store: &mut ParamStore,
    x: Tensor,
    build: impl Fn(&Graph, &ParamStore, dft_core::tensor::Var) -> dft_core::Result<dft_core::tensor::Var>,
    seed: u64,
) {
    let mut r = rng(seed);
    let g = Graph::new();
    let shape = g.shape(build(&g, store, g.constant(x.clone())).unwrap());
    let weights = random(&shape, &mut r, 1.0);
    let coords = sample_coordinates(store, 48, &mut r);
    let report = finite_difference_gradcheck(
        store,
        |g, s| {
            let y = build(g, s, g.constant(x.clone()))?;
            Ok(g.sum_all(g.mul(y, g.constant(weights.clone()))?))
        },
        Graph::new,
        &coords,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut r = rng(14);

    let mut store = ParamStore::new();
    let ffn = FfnBlock::new(&mut store, &mut r, "ffn", 4, 8).unwrap();
    randomize_all(&mut store, &mut r, 1.0);
    gradcheck_layer(
        &mut store,
        random(&[3, 4], &mut r, 1.0),
        |g, s, x| ffn.forward(g, s, x),
        1,
    );

    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, &mut r, "sc", 8, 2).unwrap();
    gradcheck_layer(
        &mut store,
        random(&[2, 4, 8], &mut r, 1.0),
        |g, s, x| mha.forward(g, s, x),
        2,
    );

    let mut store = ParamStore::new();
    let tm = TimeMix::new(&mut store, &mut r, "tm", 4).unwrap();
    randomize_all(&mut store, &mut r, 0.8);
    gradcheck_layer(
        &mut store,
        random(&[2, 6, 4], &mut r, 1.0),
        |g, s, x| tm.forward(g, s, x),
        3,
    );

    let mut store = ParamStore::new();
    let cm = ChannelMix::new(&mut store, &mut r, "cm", 4, 16).unwrap();
    randomize_all(&mut store, &mut r, 0.8);
    gradcheck_layer(
        &mut store,
        random(&[2, 6, 4], &mut r, 1.0),
        |g, s, x| cm.forward(g, s, x),
        4,
    );

    let mut store = ParamStore::new();
    let stack = RwkvStack::new(&mut store, &mut r, "tc", 4, 16, 2).unwrap();
    randomize_all(&mut store, &mut r, 0.6);
    gradcheck_layer(
        &mut store,
        random(&[2, 8, 4], &mut r, 1.0),
        |g, s, x| stack.forward(g, s, x),
        5,
    );
}
