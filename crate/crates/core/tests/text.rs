use gtr::nn::{Ctx, ParamStore};
use gtr::tensor::{finite_difference_grad, max_gradient_error, Tensor};
use gtr::text::{embed, BiGru, GruCell};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in store.entries_mut() {
        for v in e.tensor.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

fn random_input(s: usize, dw: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[s, dw], |_| rng.random_range(-1.0..1.0))
}

fn run(store: &ParamStore<f64>, gru: &BiGru, x: &Tensor<f64>) -> Tensor<f64> {
    let mut cx = Ctx::new(store);
    let xv = cx.g.constant(x.clone());
    let out = gru.forward(&mut cx, xv).unwrap();
    cx.g.tensor(out)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Scalar unrolling of one GRU direction over `order`.
fn oracle(
    store: &ParamStore<f64>,
    cell: &GruCell,
    x: &Tensor<f64>,
    order: &[usize],
) -> Vec<Vec<f64>> {
    let hd = cell.hidden;
    let w = store.get(cell.input.w);
    let b = store.get(cell.input.b.unwrap());
    let uzr = store.get(cell.recur_zr);
    let uh = store.get(cell.recur_h);
    let dw = x.cols();
    let mut h = vec![0.0; hd];
    let mut states = Vec::new();
    for &t in order {
        let xw =
            |col: usize| b.data()[col] + (0..dw).map(|i| x.at(t, i) * w.at(i, col)).sum::<f64>();
        let z: Vec<f64> = (0..hd)
            .map(|j| sigmoid(xw(j) + (0..hd).map(|k| h[k] * uzr.at(k, j)).sum::<f64>()))
            .collect();
        let r: Vec<f64> = (0..hd)
            .map(|j| sigmoid(xw(hd + j) + (0..hd).map(|k| h[k] * uzr.at(k, hd + j)).sum::<f64>()))
            .collect();
        let cand: Vec<f64> = (0..hd)
            .map(|j| {
                (xw(2 * hd + j) + (0..hd).map(|k| r[k] * h[k] * uh.at(k, j)).sum::<f64>()).tanh()
            })
            .collect();
        h = (0..hd)
            .map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j])
            .collect();
        states.push(h.clone());
    }
    states
}

#[test]
fn matches_hand_unrolled_oracle() {
    let (dw, hd) = (3, 4);
    for (seed, s) in [(1, 2), (2, 2), (3, 5)] {
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, "gru", dw, hd);
        randomize(&mut store, seed);
        let x = random_input(s, dw, seed + 100);
        let out = run(&store, &gru, &x);
        assert_eq!(out.shape(), &[s, 2 * hd]);
        let fwd = oracle(&store, &gru.forward, &x, &(0..s).collect::<Vec<_>>());
        let mut bwd = oracle(&store, &gru.backward, &x, &(0..s).rev().collect::<Vec<_>>());
        bwd.reverse();
        for t in 0..s {
            for j in 0..hd {
                assert!((out.at(t, j) - fwd[t][j]).abs() < 1e-12);
                assert!((out.at(t, hd + j) - bwd[t][j]).abs() < 1e-12);
            }
        }
    }
}

fn tie_directions(store: &mut ParamStore<f64>) {
    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
    for name in names.iter().filter(|n| n.contains(".fwd.")) {
        let t = store.by_name(name).unwrap().clone();
        store.assign(&name.replace(".fwd.", ".bwd."), t).unwrap();
    }
}

#[test]
fn single_token_halves_agree_with_tied_weights() {
    let mut store = ParamStore::new();
    let gru = BiGru::new(&mut store, "gru", 3, 4);
    randomize(&mut store, 7);
    tie_directions(&mut store);
    let out = run(&store, &gru, &random_input(1, 3, 8));
    assert_eq!(&out.row(0)[..4], &out.row(0)[4..]);
}

#[test]
fn reversing_input_swaps_directions_with_tied_weights() {
    let mut store = ParamStore::new();
    let gru = BiGru::new(&mut store, "gru", 3, 4);
    randomize(&mut store, 9);
    tie_directions(&mut store);
    let x = random_input(6, 3, 10);
    let rev = Tensor::new(
        vec![6, 3],
        (0..6).rev().flat_map(|t| x.row(t).to_vec()).collect(),
    )
    .unwrap();
    let a = run(&store, &gru, &x);
    let b = run(&store, &gru, &rev);
    for t in 0..6 {
        assert_eq!(&a.row(t)[..4], &b.row(5 - t)[4..]);
        assert_eq!(&a.row(t)[4..], &b.row(5 - t)[..4]);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let (dw, hd, s) = (3, 3, 4);
    let mut store = ParamStore::new();
    let gru = BiGru::new(&mut store, "gru", dw, hd);
    randomize(&mut store, 11);
    let x = random_input(s, dw, 12);
    let readout = random_input(s, 2 * hd, 13);

    let loss_of = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let out = run(store, &gru, x);
        out.data()
            .iter()
            .zip(readout.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut cx = Ctx::new(&store);
    let xv = cx.g.leaf(&x.clone().with_requires_grad(true));
    let out = gru.forward(&mut cx, xv).unwrap();
    let r = cx.g.constant(readout.clone());
    let prod = cx.g.mul(out, r).unwrap();
    let loss = cx.g.sum(prod);
    cx.g.backward(loss).unwrap();
    let grads = cx.param_grads();
    let dx = cx.g.grad(xv).unwrap();
    drop(cx);

    let num = finite_difference_grad(|t| loss_of(&store, t), &x, 1e-6);
    assert!(max_gradient_error(&dx, num.data(), 1e-6).within(1e-6, 1e-8));

    for (i, e) in store.entries().iter().enumerate() {
        let name = e.name.clone();
        let num = finite_difference_grad(
            |t| {
                let mut probe = store.clone();
                probe.assign(&name, t.clone()).unwrap();
                loss_of(&probe, &x)
            },
            &e.tensor,
            1e-6,
        );
        let err = max_gradient_error(grads[i].as_ref().unwrap(), num.data(), 1e-6);
        assert!(err.within(1e-6, 1e-8), "{name}: {err:?}");
    }
}

#[test]
fn embedding_gradient_counts_occurrences() {
    let mut store = ParamStore::<f64>::new();
    let table = store.add("emb", gtr::nn::ParamKind::Embedding, &[5, 2]);
    randomize(&mut store, 14);
    let mut cx = Ctx::new(&store);
    let rows = embed(&mut cx, table, &[3, 1, 3, 3]).unwrap();
    assert_eq!(cx.g.value(rows)[..2], store.get(table).row(3)[..]);
    let loss = cx.g.sum(rows);
    cx.g.backward(loss).unwrap();
    let g = cx.param_grads()[0].clone().unwrap();
    assert_eq!(g, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 3.0, 3.0, 0.0, 0.0]);
}
