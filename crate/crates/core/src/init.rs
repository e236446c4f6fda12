//! Parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Element;

/// Standard deviation of embedding-table entries.
pub const EMBEDDING_STD: f64 = 0.02;

/// Xavier-uniform bound `√(6/(fan_in+fan_out))` for a `[fan_in × fan_out]` matrix.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Re-initialize every parameter in store order from one seeded stream:
/// weights Xavier-uniform, embeddings normal(0, 0.02), biases zero, norm
/// gains one, fusion mixing weights 0.5.
pub fn xavier_init<E: Element>(store: &mut ParamStore<E>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, EMBEDDING_STD).expect("valid std");
    for e in store.entries_mut() {
        let shape = e.tensor.shape().to_vec();
        let data = e.tensor.data_mut();
        match e.kind {
            ParamKind::Weight => {
                let (fan_in, fan_out) = match shape.as_slice() {
                    [a, b] => (*a, *b),
                    _ => (data.len(), data.len()),
                };
                let a = xavier_bound(fan_in, fan_out);
                data.iter_mut()
                    .for_each(|v| *v = E::of(rng.random_range(-a..=a)));
            }
            ParamKind::Embedding => data
                .iter_mut()
                .for_each(|v| *v = E::of(normal.sample(&mut rng))),
            ParamKind::Bias => data.fill(E::zero()),
            ParamKind::Gain => data.fill(E::one()),
            ParamKind::Mix => data.fill(E::of(0.5)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let build = || {
            let mut s = ParamStore::<f32>::new();
            s.linear("a", 16, 8, true);
            s.add("emb", ParamKind::Embedding, &[10, 4]);
            s
        };
        let (mut a, mut b) = (build(), build());
        xavier_init(&mut a, 3);
        xavier_init(&mut b, 3);
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert_eq!(x.tensor, y.tensor);
        }
        let bound = xavier_bound(16, 8) as f32;
        assert!(a
            .by_name("a.w")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
        assert!(a.by_name("a.b").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
