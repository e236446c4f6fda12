use gtr::config::ModelConfig;
use gtr::data::{gen_synthetic, DataSpec};
use gtr::decoder::{
    attention_csv, fuse_conditional, fuse_divided, fuse_early, fuse_hybrid,
    fuse_hybrid_value_split, fuse_joint, fuse_stepwise, schedule, Decoder, FusionConfig,
    FusionMode, Mcma, PredictionHeads, PredictionSet,
};
use gtr::model::Gtr;
use gtr::nn::{Ctx, Linear, ParamStore};
use gtr::tensor::{finite_difference_grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 8;

type Rows = Vec<Vec<f64>>;

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in store.entries_mut() {
        for v in e.tensor.data_mut() {
            *v = rng.random_range(-0.7..0.7);
        }
    }
}

fn random(rows: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[rows, D], |_| rng.random_range(-1.0..1.0))
}

fn to_rows(t: &Tensor<f64>) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn lin(store: &ParamStore<f64>, l: &Linear, x: &Rows) -> Rows {
    let w = store.get(l.w);
    let b = store.get(l.b.unwrap());
    x.iter()
        .map(|r| {
            (0..w.cols())
                .map(|o| {
                    b.data()[o]
                        + r.iter()
                            .enumerate()
                            .map(|(i, v)| v * w.at(i, o))
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Loop-based scaled dot-product attention on projected inputs.
fn naive_attend(q: &Rows, k: &Rows, v: &Rows, heads: usize) -> Rows {
    let dh = q[0].len() / heads;
    q.iter()
        .map(|qr| {
            let mut out = vec![0.0; qr.len()];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kr| cols.clone().map(|c| qr[c] * kr[c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax(&logits);
                for c in cols.clone() {
                    out[c] = w.iter().zip(v).map(|(a, vr)| a * vr[c]).sum();
                }
            }
            out
        })
        .collect()
}

fn naive_mha(
    store: &ParamStore<f64>,
    p: &gtr::transformer::MhaParams,
    q: &Rows,
    kv: &Rows,
) -> Rows {
    let a = naive_attend(
        &lin(store, &p.q, q),
        &lin(store, &p.k, kv),
        &lin(store, &p.v, kv),
        p.heads,
    );
    lin(store, &p.o, &a)
}

fn naive_layer_norm(x: &Rows) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            r.iter().map(|v| (v - m) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

fn assert_close(a: &Rows, b: &Rows, tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.iter().zip(y) {
            assert!((u - v).abs() <= tol, "{u} vs {v}");
        }
    }
}

fn mcma(mode: FusionMode, heads: usize, seed: u64) -> (ParamStore<f64>, Mcma) {
    let mut store = ParamStore::new();
    let m = Mcma::new(&mut store, "m", mode, D, heads).unwrap();
    randomize(&mut store, seed);
    (store, m)
}

/// Run `f(cx, q, h, s)` on fresh constants and return the output rows.
fn eval(
    store: &ParamStore<f64>,
    q: &Tensor<f64>,
    h: &Tensor<f64>,
    s: &Tensor<f64>,
    f: impl FnOnce(&mut Ctx<'_, f64>, gtr::Var, gtr::Var, gtr::Var) -> gtr::Result<gtr::Var>,
) -> Rows {
    let mut cx = Ctx::new(store);
    let (qv, hv, sv) = (
        cx.g.constant(q.clone()),
        cx.g.constant(h.clone()),
        cx.g.constant(s.clone()),
    );
    let out = f(&mut cx, qv, hv, sv).unwrap();
    to_rows(&cx.g.tensor(out))
}

fn empty() -> Tensor<f64> {
    Tensor::new(vec![0, D], vec![]).unwrap()
}

#[test]
fn joint_matches_oracle_and_reduces_without_language() {
    let (store, m) = mcma(FusionMode::Joint, 2, 1);
    let Mcma::Joint { q, kv, o } = m else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (qt, h, s) = (
        random(3, &mut rng),
        random(5, &mut rng),
        random(4, &mut rng),
    );

    let out = eval(&store, &qt, &h, &s, |cx, a, b, c| {
        fuse_joint(cx, a, b, c, q, &kv, o, 2, 0)
    });
    let (qr, hr, sr) = (to_rows(&qt), to_rows(&h), to_rows(&s));
    let keys = [lin(&store, &kv.hk, &hr), lin(&store, &kv.sk, &sr)].concat();
    let vals = [lin(&store, &kv.hv, &hr), lin(&store, &kv.sv, &sr)].concat();
    let expect = lin(
        &store,
        &o,
        &naive_attend(&lin(&store, &q, &qr), &keys, &vals, 2),
    );
    assert_close(&out, &expect, 1e-12);

    let out = eval(&store, &qt, &h, &empty(), |cx, a, b, c| {
        fuse_joint(cx, a, b, c, q, &kv, o, 2, 0)
    });
    let expect = lin(
        &store,
        &o,
        &naive_attend(
            &lin(&store, &q, &qr),
            &lin(&store, &kv.hk, &hr),
            &lin(&store, &kv.hv, &hr),
            2,
        ),
    );
    assert_close(&out, &expect, 1e-12);
}

#[test]
fn joint_over_duplicated_memory_equals_single_memory() {
    let (mut store, m) = mcma(FusionMode::Joint, 2, 3);
    let Mcma::Joint { q, kv, o } = m else {
        unreachable!()
    };
    for (from, to) in [("m.hk", "m.sk"), ("m.hv", "m.sv")] {
        for suffix in [".w", ".b"] {
            let t = store.by_name(&format!("{from}{suffix}")).unwrap().clone();
            store.assign(&format!("{to}{suffix}"), t).unwrap();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (qt, h) = (random(3, &mut rng), random(5, &mut rng));
    let out = eval(&store, &qt, &h, &h, |cx, a, b, c| {
        fuse_joint(cx, a, b, c, q, &kv, o, 2, 0)
    });
    let single = eval(&store, &qt, &h, &empty(), |cx, a, b, c| {
        fuse_joint(cx, a, b, c, q, &kv, o, 2, 0)
    });
    assert_close(&out, &single, 1e-12);
}

#[test]
fn divided_mixing() {
    let (mut store, m) = mcma(FusionMode::Divided, 2, 5);
    let Mcma::Divided {
        video,
        language,
        mix,
    } = m
    else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (qt, h, s) = (
        random(3, &mut rng),
        random(5, &mut rng),
        random(4, &mut rng),
    );

    store.get_mut(mix[0]).data_mut()[0] = 1.0;
    store.get_mut(mix[1]).data_mut()[0] = 0.0;
    let out = eval(&store, &qt, &h, &s, |cx, a, b, c| {
        fuse_divided(cx, a, b, c, &video, &language, mix, 0)
    });
    assert_close(
        &out,
        &naive_mha(&store, &video, &to_rows(&qt), &to_rows(&h)),
        1e-12,
    );

    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
    for n in names.iter().filter(|n| n.starts_with("m.video.")) {
        let t = store.by_name(n).unwrap().clone();
        store
            .assign(&n.replace("m.video.", "m.language."), t)
            .unwrap();
    }
    store.get_mut(mix[0]).data_mut()[0] = 0.5;
    store.get_mut(mix[1]).data_mut()[0] = 0.5;
    let out = eval(&store, &qt, &h, &h, |cx, a, b, c| {
        fuse_divided(cx, a, b, c, &video, &language, mix, 0)
    });
    assert_close(
        &out,
        &naive_mha(&store, &video, &to_rows(&qt), &to_rows(&h)),
        1e-12,
    );
}

#[test]
fn divided_mixing_gradients() {
    let (store, m) = mcma(FusionMode::Divided, 2, 7);
    let Mcma::Divided {
        video,
        language,
        mix,
    } = m
    else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (qt, h, s) = (
        random(3, &mut rng),
        random(5, &mut rng),
        random(4, &mut rng),
    );
    let readout = random(3, &mut rng);
    let loss_of = |store: &ParamStore<f64>| -> f64 {
        let out = eval(store, &qt, &h, &s, |cx, a, b, c| {
            fuse_divided(cx, a, b, c, &video, &language, mix, 0)
        });
        out.concat()
            .iter()
            .zip(readout.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut cx = Ctx::new(&store);
    let (qv, hv, sv) = (
        cx.g.constant(qt.clone()),
        cx.g.constant(h.clone()),
        cx.g.constant(s.clone()),
    );
    let out = fuse_divided(&mut cx, qv, hv, sv, &video, &language, mix, 0).unwrap();
    let r = cx.g.constant(readout.clone());
    let prod = cx.g.mul(out, r).unwrap();
    let loss = cx.g.sum(prod);
    cx.g.backward(loss).unwrap();
    let grads = cx.param_grads();
    drop(cx);
    for id in mix {
        let name = store.entry(id).name.clone();
        let num = finite_difference_grad(
            |t| {
                let mut probe = store.clone();
                probe.assign(&name, t.clone()).unwrap();
                loss_of(&probe)
            },
            store.get(id),
            1e-6,
        );
        let a = grads[id.index()].as_ref().unwrap()[0];
        assert!(
            (a - num.data()[0]).abs() / a.abs().max(1e-12) < 1e-7,
            "{name}"
        );
    }
}

#[test]
fn hybrid_blocks_each_sum_to_one() {
    let (store, m) = mcma(FusionMode::Hybrid, 2, 9);
    let Mcma::Hybrid { qh, qs, kv, o } = m else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (qt, h, s) = (
        random(3, &mut rng),
        random(5, &mut rng),
        random(4, &mut rng),
    );
    let mut cx = Ctx::new(&store).with_attention_trace();
    let (qv, hv, sv) = (
        cx.g.constant(qt.clone()),
        cx.g.constant(h.clone()),
        cx.g.constant(s.clone()),
    );
    fuse_hybrid(&mut cx, qv, hv, sv, [qh, qs], &kv, o, 2, 0).unwrap();
    let blocks = cx.attention.take().unwrap();
    assert_eq!(blocks.len(), 2);
    for q in 0..3 {
        let total: f64 = blocks
            .iter()
            .map(|b| b.weights.row(q).iter().sum::<f64>())
            .sum();
        assert!((total - 2.0).abs() < 1e-12);
    }

    let out = eval(&store, &qt, &h, &empty(), |cx, a, b, c| {
        fuse_hybrid(cx, a, b, c, [qh, qs], &kv, o, 2, 0)
    });
    let (qr, hr) = (to_rows(&qt), to_rows(&h));
    let expect = lin(
        &store,
        &o,
        &naive_attend(
            &lin(&store, &qh, &qr),
            &lin(&store, &kv.hk, &hr),
            &lin(&store, &kv.hv, &hr),
            2,
        ),
    );
    assert_close(&out, &expect, 1e-12);
}

#[test]
fn hybrid_one_head_hand_instance() {
    // N = F = S = 1, d = 2: each softmax has one entry, so the output is
    // the sum of both projected values, then the output projection.
    let mut store = ParamStore::<f64>::new();
    let m = Mcma::new(&mut store, "m", FusionMode::Hybrid, 2, 1).unwrap();
    let Mcma::Hybrid { qh, qs, kv, o } = m else {
        unreachable!()
    };
    let set = |store: &mut ParamStore<f64>, l: Linear, w: [f64; 4], b: [f64; 2]| {
        store.get_mut(l.w).data_mut().copy_from_slice(&w);
        store.get_mut(l.b.unwrap()).data_mut().copy_from_slice(&b);
    };
    set(&mut store, kv.hv, [1.0, 0.0, 0.0, 1.0], [0.0, 0.0]);
    set(&mut store, kv.sv, [2.0, 0.0, 0.0, 2.0], [1.0, 0.0]);
    set(&mut store, o, [1.0, 1.0, 0.0, 1.0], [0.0, 0.5]);
    set(&mut store, qh, [3.0, 1.0, -2.0, 0.5], [0.1, 0.2]);
    set(&mut store, qs, [-1.0, 4.0, 0.0, 1.0], [0.0, 0.0]);
    let q = Tensor::from_rows(&[&[0.3, -0.7]]);
    let h = Tensor::from_rows(&[&[1.0, 2.0]]);
    let s = Tensor::from_rows(&[&[-1.0, 0.5]]);
    let mut cx = Ctx::new(&store);
    let (qv, hv, sv) = (cx.g.constant(q), cx.g.constant(h), cx.g.constant(s));
    let out = fuse_hybrid(&mut cx, qv, hv, sv, [qh, qs], &kv, o, 1, 0).unwrap();
    // values: h·I = (1, 2); s·2I + (1, 0) = (−1, 1); sum (0, 3);
    // output: (0, 3)·[[1, 1], [0, 1]] + (0, 0.5) = (0, 3.5).
    let got = cx.g.value(out);
    assert!((got[0] - 0.0).abs() < 1e-12 && (got[1] - 3.5).abs() < 1e-12);
}

#[test]
fn value_split_equals_joint_with_tied_projections() {
    let (store, m) = mcma(FusionMode::HybridValueSplit, 2, 11);
    let Mcma::HybridValueSplit { qh, kv, o, .. } = m else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (qt, h, s) = (
        random(3, &mut rng),
        random(5, &mut rng),
        random(4, &mut rng),
    );
    let split = eval(&store, &qt, &h, &s, |cx, a, b, c| {
        fuse_hybrid_value_split(cx, a, b, c, [qh, qh], &kv, o, 2, 0)
    });
    let joint = eval(&store, &qt, &h, &s, |cx, a, b, c| {
        fuse_joint(cx, a, b, c, qh, &kv, o, 2, 0)
    });
    assert_close(&split, &joint, 1e-12);

    let split = eval(&store, &qt, &h, &empty(), |cx, a, b, c| {
        fuse_hybrid_value_split(cx, a, b, c, [qh, qh], &kv, o, 2, 0)
    });
    let (qr, hr) = (to_rows(&qt), to_rows(&h));
    let expect = lin(
        &store,
        &o,
        &naive_attend(
            &lin(&store, &qh, &qr),
            &lin(&store, &kv.hk, &hr),
            &lin(&store, &kv.hv, &hr),
            2,
        ),
    );
    assert_close(&split, &expect, 1e-12);
}

#[test]
fn stepwise_with_one_video_token() {
    for (mode, lf) in [
        (FusionMode::Stepwise, false),
        (FusionMode::StepwiseLv, true),
    ] {
        let (store, m) = mcma(mode, 2, 13);
        let Mcma::Stepwise {
            first,
            mid_norm,
            second,
            language_first,
        } = m
        else {
            unreachable!()
        };
        assert_eq!(language_first, lf);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (qt, one, many) = (
            random(3, &mut rng),
            random(1, &mut rng),
            random(4, &mut rng),
        );
        // The single-token memory goes first in either order.
        let (h, s) = if lf {
            (many.clone(), one.clone())
        } else {
            (one.clone(), many.clone())
        };
        let out = eval(&store, &qt, &h, &s, |cx, a, b, c| {
            fuse_stepwise(cx, a, b, c, &first, &mid_norm, &second, language_first, 0)
        });
        let passed = naive_mha(&store, &first, &to_rows(&qt), &to_rows(&one));
        let expect_inner = lin(&store, &first.o, &lin(&store, &first.v, &to_rows(&one)));
        assert_close(&passed, &vec![expect_inner[0].clone(); 3], 1e-12);
        let resid: Rows = to_rows(&qt)
            .iter()
            .zip(&passed)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let gain = store.get(mid_norm.gain).data().to_vec();
        let bias = store.get(mid_norm.bias).data().to_vec();
        let mid: Rows = naive_layer_norm(&resid)
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(i, v)| v * gain[i] + bias[i])
                    .collect()
            })
            .collect();
        let expect: Rows = naive_mha(&store, &second, &mid, &to_rows(&many))
            .iter()
            .zip(&mid)
            .zip(&to_rows(&qt))
            .map(|((o, m), q)| (0..D).map(|i| o[i] + m[i] - q[i]).collect())
            .collect();
        assert_close(&out, &expect, 1e-10);
    }
}

#[test]
fn early_memory_is_video_then_language() {
    let store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (h, s) = (random(5, &mut rng), random(2, &mut rng));
    let mut cx = Ctx::new(&store);
    let (hv, sv) = (cx.g.constant(h.clone()), cx.g.constant(s.clone()));
    let mem = fuse_early(&mut cx.g, hv, sv).unwrap();
    assert_eq!(
        to_rows(&cx.g.tensor(mem)),
        [to_rows(&h), to_rows(&s)].concat()
    );
    let e = cx.g.constant(empty());
    let mem = fuse_early(&mut cx.g, hv, e).unwrap();
    assert_eq!(cx.g.tensor(mem), h);
}

#[test]
fn conditional_pools_language_and_feeds_both_inputs() {
    let mut store = ParamStore::<f64>::new();
    let proj = store.linear("c", 2 * D, D, true);
    randomize(&mut store, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let q = random(3, &mut rng);
    let row = random(1, &mut rng);
    let s = Tensor::new(vec![4, D], row.data().repeat(4)).unwrap();
    let pooled_four = eval(&store, &q, &s, &s, |cx, a, _, c| {
        fuse_conditional(cx, a, c, &proj)
    });
    let pooled_one = eval(&store, &q, &row, &row, |cx, a, _, c| {
        fuse_conditional(cx, a, c, &proj)
    });
    assert_close(&pooled_four, &pooled_one, 1e-12);

    let s = random(4, &mut rng);
    let readout = random(3, &mut rng);
    let loss = |q: &Tensor<f64>, s: &Tensor<f64>| -> f64 {
        let out = eval(&store, q, s, s, |cx, a, _, c| {
            fuse_conditional(cx, a, c, &proj)
        });
        out.concat()
            .iter()
            .zip(readout.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let gq = finite_difference_grad(|t| loss(t, &s), &q, 1e-6);
    let gs = finite_difference_grad(|t| loss(&q, t), &s, 1e-6);
    assert!(gq.data().iter().any(|v| v.abs() > 1e-6));
    assert!(gs.data().iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn decoder_shapes_for_every_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (h, s) = (random(6, &mut rng), random(3, &mut rng));
    for n in [1, 4, 7] {
        let q = random(n, &mut rng);
        for mode in FusionMode::ALL {
            let mut store = ParamStore::new();
            let cfg = FusionConfig {
                mode,
                heads: vec![1, 2],
            };
            let dec = Decoder::new(&mut store, &cfg, D, 16).unwrap();
            randomize(&mut store, 19);
            let heads = PredictionHeads::new(&mut store, D);
            let mut cx = Ctx::new(&store);
            let (qv, hv, sv) = (
                cx.g.constant(q.clone()),
                cx.g.constant(h.clone()),
                cx.g.constant(s.clone()),
            );
            let out = dec.decode(&mut cx, qv, hv, sv).unwrap();
            assert_eq!(cx.g.shape(out), &[n, D], "{mode}");
            let p = heads.forward(&mut cx, out).unwrap();
            let set = PredictionSet::from_vars(&cx.g, &p);
            assert_eq!(set.len(), n);
            assert!(set
                .boxes
                .iter()
                .flatten()
                .chain(&set.confidence)
                .all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn zeroed_heads_predict_the_midpoint() {
    let mut store = ParamStore::<f64>::new();
    let heads = PredictionHeads::new(&mut store, D);
    randomize(&mut store, 20);
    for l in [heads.box_mlp[2], heads.confidence] {
        store.get_mut(l.w).data_mut().fill(0.0);
        store.get_mut(l.b.unwrap()).data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cx = Ctx::new(&store);
    let x = cx.g.constant(random(3, &mut rng));
    let p = heads.forward(&mut cx, x).unwrap();
    let set = PredictionSet::from_vars(&cx.g, &p);
    for i in 0..3 {
        assert_eq!(set.boxes[i], [0.5, 0.5]);
        assert_eq!(set.confidence[i], 0.5);
        let seg = set.segment(i);
        assert_eq!((seg.start, seg.end), (0.25, 0.75));
    }
}

#[test]
fn head_schedules() {
    assert_eq!(
        schedule::parse("columnar", 6).unwrap(),
        schedule::COLUMNAR.to_vec()
    );
    assert_eq!(schedule::parse("columnar:8", 3).unwrap(), vec![8, 8, 8]);
    assert_eq!(
        schedule::parse("shrink", 6).unwrap(),
        schedule::SHRINK.to_vec()
    );
    assert_eq!(
        schedule::parse("expand", 6).unwrap(),
        schedule::EXPAND.to_vec()
    );
    assert_eq!(schedule::parse("1,2", 2).unwrap(), vec![1, 2]);
    assert!(schedule::parse("1,2", 3).is_err());
    assert!(schedule::parse("shrink", 4).is_err());
    assert!(FusionConfig {
        mode: FusionMode::Joint,
        heads: vec![3]
    }
    .validate(8)
    .is_err());
}

#[test]
fn attention_export() {
    let cfg = ModelConfig {
        fusion: FusionMode::Joint,
        ..ModelConfig::toy()
    };
    let model = Gtr::<f32>::new(&cfg).unwrap();
    let sample = gen_synthetic(1, &DataSpec::from_config(&cfg), 3)
        .unwrap()
        .remove(0);
    let f = gtr::cost::visual_tokens(&cfg).unwrap();
    let s = sample.query_ids.len();
    for layer in 0..cfg.decoder_layers {
        let blocks = model
            .attention(&sample.clip, &sample.query_ids, layer)
            .unwrap();
        let csv = attention_csv(&blocks);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "query,token,modality,weight");
        assert_eq!(lines.len() - 1, cfg.queries * (f + s));
        assert!(!csv.contains('\r'));
        for b in &blocks {
            for q in 0..b.weights.rows() {
                assert!((b.weights.row(q).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let again = attention_csv(
            &model
                .attention(&sample.clip, &sample.query_ids, layer)
                .unwrap(),
        );
        assert_eq!(csv, again);
    }
    assert!(model
        .attention(&sample.clip, &sample.query_ids, cfg.decoder_layers)
        .is_err());
}
