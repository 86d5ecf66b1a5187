use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::gradcheck::check_graph;
use crate::diffcore::{Gradients, Layered, Mode};

const D: usize = 4;

fn small(kind: EncoderKind) -> EncoderConfig {
    EncoderConfig {
        kind,
        hidden: 3,
        filter_widths: vec![1, 2],
        filters_per_width: 2,
        dan_depth: 2,
        ..EncoderConfig::new(kind)
    }
}

fn setup(config: EncoderConfig, seed: u64) -> (Encoder, ParameterStore) {
    let enc = Encoder::new(config, D).unwrap();
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    enc.init_params(&mut store, &mut rng);
    // Nonzero biases so that zero-bias shortcuts are not what the tests see.
    for (_, p) in store.iter_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    (enc, store)
}

fn zero(store: &mut ParameterStore, prefix: &str) {
    for (name, p) in store.iter_mut() {
        if name.starts_with(prefix) {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn tokens(rows: &[[f64; D]], t: usize) -> (Array, Array) {
    let mut x = vec![0.0; t * D];
    let mut m = vec![0.0; t];
    for (i, r) in rows.iter().enumerate() {
        x[i * D..(i + 1) * D].copy_from_slice(r);
        m[i] = 1.0;
    }
    (
        Array::new(vec![1, t, D], x).unwrap(),
        Array::new(vec![1, t], m).unwrap(),
    )
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; D]> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
        .collect()
}

/// Plain encoding of one sentence.
fn embed(enc: &Encoder, store: &ParameterStore, x: &Array, mask: &Array) -> Vec<f64> {
    embed_with(enc, store, x, mask, None)
}

fn embed_with(
    enc: &Encoder,
    store: &ParameterStore,
    x: &Array,
    mask: &Array,
    rng: Option<&mut dyn RngCore>,
) -> Vec<f64> {
    let mut g = Graph::new();
    let xn = g.input("x");
    let e = enc.encode(&mut g, xn, mask, rng).unwrap();
    let inputs: BTreeMap<String, Array> = [("x".to_string(), x.clone())].into();
    let v = g.forward(&Layered(&inputs, store), &Mode::eval()).unwrap();
    v.get(e.embedding).data().to_vec()
}

/// attn1511 evidence embedding against a fixed hypothesis vector.
fn embed_attended(
    enc: &Encoder,
    store: &ParameterStore,
    hyp: &[f64],
    x: &Array,
    mask: &Array,
) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let h = g.constant(Array::new(vec![1, hyp.len()], hyp.to_vec()).unwrap());
    let xn = g.input("x");
    let e = enc.encode_attended(&mut g, h, xn, mask).unwrap();
    let inputs: BTreeMap<String, Array> = [("x".to_string(), x.clone())].into();
    let v = g.forward(&Layered(&inputs, store), &Mode::eval()).unwrap();
    (
        v.get(e.embedding).data().to_vec(),
        v.get(e.focus.unwrap()).data().to_vec(),
    )
}

/// Weighted-sum loss over the embedding and its gradients.
fn loss_and_grads(
    enc: &Encoder,
    store: &ParameterStore,
    x: &Array,
    mask: &Array,
) -> (f64, Gradients) {
    let mut g = Graph::new();
    let loss = build_loss(&mut g, enc, mask);
    let inputs: BTreeMap<String, Array> = [("x".to_string(), x.clone())].into();
    let v = g.forward(&Layered(&inputs, store), &Mode::eval()).unwrap();
    let grads = g.backward(loss, &v).unwrap();
    (v.get(loss).item(), grads)
}

fn build_loss(g: &mut Graph, enc: &Encoder, mask: &Array) -> NodeId {
    let n = mask.shape()[0];
    let xn = g.input("x");
    let emb = if enc.config().kind == EncoderKind::Attn1511 {
        let hyp = enc.encode(g, xn, mask, None).unwrap().embedding;
        enc.encode_attended(g, hyp, xn, mask).unwrap().embedding
    } else {
        enc.encode(g, xn, mask, None).unwrap().embedding
    };
    let w: Vec<f64> = (0..n * enc.output_width())
        .map(|i| 0.5 + (i % 5) as f64 * 0.3 - (i % 2) as f64)
        .collect();
    let w = g.constant(Array::new(vec![n, enc.output_width()], w).unwrap());
    let prod = g.mul(emb, w);
    g.sum(prod)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn avg_single_token_is_its_projection() {
    let (enc, store) = setup(small(EncoderKind::Avg), 1);
    let row = [0.3, -0.2, 0.9, 0.1];
    let (x, m) = tokens(&[row], 1);
    let w = store.get(PROJ_W).unwrap().data();
    let b = store.get(PROJ_B).unwrap().data();
    let expected: Vec<f64> = (0..3)
        .map(|j| b[j] + (0..D).map(|k| row[k] * w[k * 3 + j]).sum::<f64>())
        .collect();
    assert!(close(&embed(&enc, &store, &x, &m), &expected, 1e-12));
}

#[test]
fn avg_duplicate_tokens_match_one() {
    let (enc, store) = setup(small(EncoderKind::Avg), 1);
    let row = [0.3, -0.2, 0.9, 0.1];
    let (x1, m1) = tokens(&[row], 1);
    let (x2, m2) = tokens(&[row, row], 2);
    assert!(close(
        &embed(&enc, &store, &x1, &m1),
        &embed(&enc, &store, &x2, &m2),
        1e-12
    ));
}

#[test]
fn avg_and_dan_ignore_token_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for kind in [EncoderKind::Avg, EncoderKind::Dan] {
        let (enc, store) = setup(small(kind), 3);
        let rows = random_rows(&mut rng, 4);
        let rev: Vec<_> = rows.iter().rev().copied().collect();
        let (a, m) = tokens(&rows, 4);
        let (b, _) = tokens(&rev, 4);
        assert!(close(
            &embed(&enc, &store, &a, &m),
            &embed(&enc, &store, &b, &m),
            1e-12
        ));
    }
}

#[test]
fn cnn_and_rnn_variants_see_token_order() {
    let rows = [
        [1.0, 0.0, -0.5, 0.2],
        [0.0, 1.0, 0.3, -0.8],
        [-0.7, 0.4, 1.0, 0.0],
    ];
    let rev: Vec<_> = rows.iter().rev().copied().collect();
    let (a, m) = tokens(&rows, 3);
    let (b, _) = tokens(&rev, 3);
    for kind in [EncoderKind::Cnn, EncoderKind::Rnn, EncoderKind::RnnCnn] {
        let (enc, store) = setup(small(kind), 4);
        let ea = embed(&enc, &store, &a, &m);
        let eb = embed(&enc, &store, &b, &m);
        assert!(!close(&ea, &eb, 1e-9), "{kind} is order blind");
    }
}

#[test]
fn dan_depth_zero_equals_avg() {
    let mut cfg = small(EncoderKind::Dan);
    cfg.dan_depth = 0;
    let (dan, store) = setup(cfg, 5);
    let avg = Encoder::new(small(EncoderKind::Avg), D).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (x, m) = tokens(&random_rows(&mut rng, 3), 5);
    assert_eq!(embed(&dan, &store, &x, &m), embed(&avg, &store, &x, &m));
}

#[test]
fn dan_eval_is_deterministic_stack_over_mean() {
    let (enc, store) = setup(small(EncoderKind::Dan), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows = random_rows(&mut rng, 3);
    let (x, m) = tokens(&rows, 3);
    let out = embed(&enc, &store, &x, &m);
    assert_eq!(out, embed(&enc, &store, &x, &m));

    let dense = |v: &[f64], w: &str, b: &str, rows_in: usize| -> Vec<f64> {
        let w = store.get(w).unwrap().data();
        let b = store.get(b).unwrap().data();
        (0..3)
            .map(|j| b[j] + (0..rows_in).map(|k| v[k] * w[k * 3 + j]).sum::<f64>())
            .collect()
    };
    let mean: Vec<f64> = (0..D)
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / 3.0)
        .collect();
    let mut h = dense(&mean, PROJ_W, PROJ_B, D);
    for layer in 0..2 {
        let (w, b) = dan_names(layer);
        h = dense(&h, &w, &b, 3).into_iter().map(|v| v.max(0.0)).collect();
    }
    assert!(close(&out, &h, 1e-12));
}

#[test]
fn dan_dropout_outcomes_ignore_order() {
    let (enc, store) = setup(small(EncoderKind::Dan), 9);
    let a = [0.5, -0.1, 0.2, 0.7];
    let b = [-0.4, 0.6, 0.1, -0.3];
    let outcomes = |rows: &[[f64; D]]| -> BTreeSet<Vec<i64>> {
        let (x, m) = tokens(rows, 2);
        (0..64)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                embed_with(&enc, &store, &x, &m, Some(&mut rng))
                    .iter()
                    .map(|v| (v * 1e9).round() as i64)
                    .collect()
            })
            .collect()
    };
    let ab = outcomes(&[a, b]);
    assert_eq!(ab.len(), 3, "keep both, keep a, keep b");
    assert_eq!(ab, outcomes(&[b, a]));
}

#[test]
fn dan_all_dropped_falls_back_to_full_mean() {
    let mut cfg = small(EncoderKind::Dan);
    cfg.word_dropout = 0.999_999;
    let (enc, store) = setup(cfg, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (x, m) = tokens(&random_rows(&mut rng, 3), 3);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(12);
    assert_eq!(
        embed_with(&enc, &store, &x, &m, Some(&mut drop_rng)),
        embed(&enc, &store, &x, &m)
    );
}

#[test]
fn cnn_zero_inputs_zero_bias_give_zero() {
    let (enc, mut store) = setup(small(EncoderKind::Cnn), 13);
    for w in [1, 2] {
        zero(&mut store, &cnn_names(w).1);
    }
    let (x, m) = tokens(&[[0.0; D]; 3], 3);
    assert!(embed(&enc, &store, &x, &m).iter().all(|&v| v == 0.0));
}

#[test]
fn cnn_duplicate_max_window_changes_nothing() {
    let (enc, store) = setup(small(EncoderKind::Cnn), 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let rows = random_rows(&mut rng, 4);
    let (x, m) = tokens(&rows, 4);
    let base = embed(&enc, &store, &x, &m);

    // Every appended window already occurs, so no pooled max can move.
    let mut dup = rows.clone();
    dup.extend_from_slice(&rows[1..3]);
    let (x2, m2) = tokens(&dup, dup.len());
    assert!(close(&base, &embed(&enc, &store, &x2, &m2), 1e-12));
}

#[test]
fn cnn_identity_filter_pools_feature_max() {
    let cfg = EncoderConfig {
        filter_widths: vec![1],
        filters_per_width: 1,
        ..small(EncoderKind::Cnn)
    };
    let enc = Encoder::new(cfg, D).unwrap();
    let mut store = ParameterStore::new();
    enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    let (w, b) = cnn_names(1);
    *store.get_mut(&w).unwrap() = Array::new(vec![D, 1], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    *store.get_mut(&b).unwrap() = Array::vector(vec![0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for len in 1..6 {
        let rows: Vec<[f64; D]> = random_rows(&mut rng, len)
            .into_iter()
            .map(|mut r| {
                r[2] = r[2].abs();
                r
            })
            .collect();
        let (x, m) = tokens(&rows, len + 2);
        let brute = rows.iter().map(|r| r[2]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(embed(&enc, &store, &x, &m), vec![brute]);
    }
}

#[test]
fn rnn_palindrome_with_tied_directions() {
    let (enc, mut store) = setup(small(EncoderKind::Rnn), 17);
    let fw: Vec<(String, Array)> = store
        .iter()
        .filter(|(k, _)| k.starts_with(GRU_FW))
        .map(|(k, p)| (k.replacen(GRU_FW, GRU_BW, 1), p.value.clone()))
        .collect();
    for (k, v) in fw {
        *store.get_mut(&k).unwrap() = v;
    }
    let a = [0.2, -0.6, 0.4, 0.9];
    let b = [-0.3, 0.5, 0.7, -0.1];
    let (x, m) = tokens(&[a, b, a], 3);

    let mut g = Graph::new();
    let xn = g.input("x");
    let f = gru_pass(&mut g, xn, &m, 3, &GruParams::named(GRU_FW), false);
    let r = gru_pass(&mut g, xn, &m, 3, &GruParams::named(GRU_BW), true);
    let e = enc.encode(&mut g, xn, &m, None).unwrap();
    let inputs: BTreeMap<String, Array> = [("x".to_string(), x)].into();
    let v = g.forward(&Layered(&inputs, &store), &Mode::eval()).unwrap();
    let last = v.get(f[2]).data();
    assert!(close(last, v.get(r[0]).data(), 1e-15));
    let doubled: Vec<f64> = last.iter().map(|z| 2.0 * z).collect();
    assert!(close(v.get(e.embedding).data(), &doubled, 1e-15));
}

#[test]
fn rnn_length_one_states_agree_when_tied() {
    let (enc, mut store) = setup(small(EncoderKind::Rnn), 18);
    let names: Vec<String> = store
        .names()
        .filter(|k| k.starts_with(GRU_FW))
        .map(str::to_string)
        .collect();
    for k in names {
        let v = store.get(&k).unwrap().clone();
        *store.get_mut(&k.replacen(GRU_FW, GRU_BW, 1)).unwrap() = v;
    }
    let (x, m) = tokens(&[[0.1, 0.2, -0.3, 0.4]], 1);
    let mut g = Graph::new();
    let xn = g.input("x");
    let f = gru_pass(&mut g, xn, &m, 3, &GruParams::named(GRU_FW), false);
    let r = gru_pass(&mut g, xn, &m, 3, &GruParams::named(GRU_BW), true);
    let _ = enc;
    let inputs: BTreeMap<String, Array> = [("x".to_string(), x)].into();
    let v = g.forward(&Layered(&inputs, &store), &Mode::eval()).unwrap();
    assert_eq!(v.get(f[0]), v.get(r[0]));
}

#[test]
fn rnn_cnn_zero_gru_gives_zero_embedding() {
    let (enc, mut store) = setup(small(EncoderKind::RnnCnn), 19);
    zero(&mut store, "enc.gru");
    for w in [1, 2] {
        zero(&mut store, &cnn_names(w).1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (x, m) = tokens(&random_rows(&mut rng, 3), 3);
    assert!(embed(&enc, &store, &x, &m).iter().all(|&v| v == 0.0));
}

#[test]
fn rnn_cnn_gradients_reach_both_stages() {
    let (enc, store) = setup(small(EncoderKind::RnnCnn), 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (x, m) = tokens(&random_rows(&mut rng, 4), 4);
    let (_, grads) = loss_and_grads(&enc, &store, &x, &m);
    let norm = |prefix: &str| -> f64 {
        grads
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, g)| g.norm_sq())
            .sum()
    };
    assert!(norm("enc.cnn") > 0.0);
    assert!(norm("enc.gru.fw") > 0.0);
    assert!(norm("enc.gru.bw") > 0.0);
}

#[test]
fn attn_with_zero_scores_reduces_to_rnn_cnn() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (x, m) = tokens(&random_rows(&mut rng, 4), 6);
    let hyp: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (attn, mut store) = setup(small(EncoderKind::Attn1511), 24);
    zero(&mut store, ATTN_M);
    let plain = Encoder::new(small(EncoderKind::RnnCnn), D).unwrap();
    let (e, s) = embed_attended(&attn, &store, &hyp, &x, &m);
    assert_eq!(&s[..4], &[1.0; 4]);
    assert!(close(&e, &embed(&plain, &store, &x, &m), 1e-15));
}

#[test]
fn attn_softmax_weights_are_a_distribution() {
    let mut cfg = small(EncoderKind::Attn1511);
    cfg.focus = FocusKind::Softmax;
    let (enc, store) = setup(cfg, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let (x, m) = tokens(&random_rows(&mut rng, 3), 5);
    let (_, s) = embed_attended(&enc, &store, &[0.5, -1.0, 0.3, 0.8], &x, &m);
    assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    assert_eq!(&s[3..], &[0.0, 0.0]);
}

#[test]
fn attn_overwhelming_token_dominates() {
    // Width-1 filters after a softmax that puts nearly all weight on one
    // token: the embedding is the filter response to that token's scaled
    // state, which for relu with zero bias is relu(state · w).
    let cfg = EncoderConfig {
        filter_widths: vec![1],
        focus: FocusKind::Softmax,
        ..small(EncoderKind::Attn1511)
    };
    let (enc, mut store) = setup(cfg, 27);
    zero(&mut store, &cnn_names(1).1);
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let (x, m) = tokens(&random_rows(&mut rng, 3), 3);

    // Token states and a score direction pushing token 1 far ahead.
    let mut g = Graph::new();
    let xn = g.input("x");
    let fw = gru_pass(&mut g, xn, &m, 3, &GruParams::named(GRU_FW), false);
    let bw = gru_pass(&mut g, xn, &m, 3, &GruParams::named(GRU_BW), true);
    let inputs: BTreeMap<String, Array> = [("x".to_string(), x.clone())].into();
    let v = g.forward(&Layered(&inputs, &store), &Mode::eval()).unwrap();
    let states: Vec<Vec<f64>> = (0..3)
        .map(|t| {
            v.get(fw[t])
                .data()
                .iter()
                .zip(v.get(bw[t]).data())
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    // M = u vᵀ with hyp·u = 1, so a(t) = v·s_t; choose v to separate token 1.
    let dir: Vec<f64> = (0..3).map(|k| states[1][k] - states[0][k] - states[2][k]).collect();
    let scale = 400.0;
    let mut mm = vec![0.0; 2 * 3];
    for k in 0..3 {
        mm[k] = scale * dir[k];
    }
    *store.get_mut(ATTN_M).unwrap() = Array::new(vec![2, 3], mm).unwrap();
    let (e, s) = embed_attended(&enc, &store, &[1.0, 0.0], &x, &m);
    assert!(s[1] > 1.0 - 1e-9, "focus {s:?}");

    let w = store.get(&cnn_names(1).0).unwrap().data();
    let brute: Vec<f64> = (0..2)
        .map(|f| {
            (0..3)
                .map(|t| {
                    let r: f64 = (0..3).map(|k| s[t] * states[t][k] * w[k * 2 + f]).sum();
                    r.max(0.0)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let dominant: Vec<f64> = (0..2)
        .map(|f| (0..3).map(|k| states[1][k] * w[k * 2 + f]).sum::<f64>().max(0.0))
        .collect();
    assert!(close(&e, &brute, 1e-12));
    assert!(close(&e, &dominant, 1e-6), "{e:?} vs {dominant:?}");
}

#[test]
fn attn_depends_on_the_hypothesis() {
    let (enc, store) = setup(small(EncoderKind::Attn1511), 29);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..5 {
        let (x, m) = tokens(&random_rows(&mut rng, 4), 4);
        let h1: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let h2: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (e1, _) = embed_attended(&enc, &store, &h1, &x, &m);
        let (e2, _) = embed_attended(&enc, &store, &h2, &x, &m);
        assert!(!close(&e1, &e2, 1e-12));
    }
}

#[test]
fn attention_requires_attn1511() {
    let (enc, _) = setup(small(EncoderKind::RnnCnn), 0);
    let (_, m) = tokens(&[[0.0; D]; 2], 2);
    let mut g = Graph::new();
    let h = g.input("h");
    let x = g.input("x");
    assert!(enc.encode_attended(&mut g, h, x, &m).is_err());
}

#[test]
fn every_encoder_is_padding_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for kind in EncoderKind::ALL {
        let (enc, store) = setup(small(kind), 32);
        let rows = random_rows(&mut rng, 3);
        let (x, m) = tokens(&rows, 3);
        let (mut xp, mp) = tokens(&rows, 7);
        // Garbage in the padded positions must be ignored too.
        for v in &mut xp.data_mut()[3 * D..] {
            *v = rng.gen_range(-5.0..5.0);
        }
        let (l1, g1) = loss_and_grads(&enc, &store, &x, &m);
        let (l2, g2) = loss_and_grads(&enc, &store, &xp, &mp);
        assert!((l1 - l2).abs() <= 1e-12, "{kind}: {l1} vs {l2}");
        for (name, a) in &g1.params {
            assert!(close(a.data(), g2.params[name].data(), 1e-12), "{kind} {name}");
        }
        let gx = g2.inputs["x"].data();
        assert!(gx[3 * D..].iter().all(|&v| v == 0.0), "{kind}");
        assert!(close(&g1.inputs["x"].data()[..3 * D], &gx[..3 * D], 1e-12));
    }
}

#[test]
fn every_encoder_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for kind in EncoderKind::ALL {
        let (enc, store) = setup(small(kind), 34);
        // Two sentences of different lengths in one batch.
        let mut xs = vec![0.0; 2 * 4 * D];
        xs.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let x = Array::new(vec![2, 4, D], xs).unwrap();
        let m = Array::new(vec![2, 4], vec![1., 1., 1., 1., 1., 1., 0., 0.]).unwrap();
        let mut g = Graph::new();
        let loss = build_loss(&mut g, &enc, &m);
        let mut bindings: BTreeMap<String, Array> = store
            .iter()
            .map(|(k, p)| (k.to_string(), p.value.clone()))
            .collect();
        bindings.insert("x".into(), x);
        let wrt: Vec<String> = bindings.keys().cloned().collect();
        let err = check_graph(&g, loss, &mut bindings, &wrt, 1e-6, &Mode::eval()).unwrap();
        assert!(err <= 1e-4, "{kind}: relative error {err}");
    }
}

#[test]
fn siamese_sides_share_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for kind in EncoderKind::ALL {
        let (enc, mut store) = setup(small(kind), 36);
        let (hx, hm) = tokens(&random_rows(&mut rng, 3), 3);
        let (ex, em) = tokens(&random_rows(&mut rng, 4), 4);
        let build = |g: &mut Graph| {
            let h = g.input("h");
            let e = g.input("e");
            let he = enc.encode(g, h, &hm, None).unwrap().embedding;
            let ee = if kind == EncoderKind::Attn1511 {
                enc.encode_attended(g, he, e, &em).unwrap().embedding
            } else {
                enc.encode(g, e, &em, None).unwrap().embedding
            };
            (he, ee)
        };
        let mut g = Graph::new();
        let (he, ee) = build(&mut g);
        let mut one = Graph::new();
        let h = one.input("h");
        enc.encode(&mut one, h, &hm, None).unwrap();
        let shared: BTreeSet<&str> = one.param_names().collect();
        let all: BTreeSet<&str> = g.param_names().collect();
        assert!(shared.is_subset(&all));
        assert_eq!(all.len(), store.len(), "{kind}");

        let inputs: BTreeMap<String, Array> =
            [("h".to_string(), hx.clone()), ("e".to_string(), ex.clone())].into();
        let before = g.forward(&Layered(&inputs, &store), &Mode::eval()).unwrap();
        let name = shared.iter().next().unwrap().to_string();
        store.get_mut(&name).unwrap().data_mut()[0] += 0.5;
        let after = g.forward(&Layered(&inputs, &store), &Mode::eval()).unwrap();
        assert_ne!(before.get(he), after.get(he), "{kind}");
        assert_ne!(before.get(ee), after.get(ee), "{kind}");
    }
}

#[test]
fn all_masked_sentence_is_rejected() {
    for kind in EncoderKind::ALL {
        let enc = Encoder::new(small(kind), D).unwrap();
        let m = Array::new(vec![2, 3], vec![1., 0., 0., 0., 0., 0.]).unwrap();
        let mut g = Graph::new();
        let x = g.input("x");
        assert!(enc.encode(&mut g, x, &m, None).is_err(), "{kind}");
    }
}

#[test]
fn short_padding_is_rejected_for_cnn() {
    let enc = Encoder::new(EncoderConfig::new(EncoderKind::Cnn), D).unwrap();
    assert_eq!(enc.min_len(), 5);
    let (_, m) = tokens(&[[0.0; D]; 3], 3);
    let mut g = Graph::new();
    let x = g.input("x");
    assert!(enc.encode(&mut g, x, &m, None).is_err());
}

#[test]
fn config_defaults_and_validation() {
    let c = EncoderConfig::default();
    assert_eq!(c.hidden, 100);
    assert_eq!(c.filter_widths, [2, 3, 4, 5]);
    assert_eq!(c.filters_per_width, 50);
    assert_eq!(c.dan_depth, 2);
    assert_eq!(EncoderConfig::new(EncoderKind::Cnn).output_width(), 200);
    assert_eq!(EncoderConfig::new(EncoderKind::Rnn).output_width(), 100);

    let bad = EncoderConfig {
        hidden: 0,
        filter_widths: vec![0],
        word_dropout: 1.0,
        ..EncoderConfig::new(EncoderKind::Cnn)
    };
    assert_eq!(bad.validate().len(), 3);
    assert!(Encoder::new(bad, D).is_err());

    let json = r#"{"kind":"attn1511","focus":"softmax","hidden":8}"#;
    let c: EncoderConfig = serde_json::from_str(json).unwrap();
    assert_eq!(c.kind, EncoderKind::Attn1511);
    assert_eq!(c.focus, FocusKind::Softmax);
    assert_eq!(c.filters_per_width, 50);
    assert!(serde_json::from_str::<EncoderConfig>(r#"{"kind":"lstm"}"#).is_err());
}
