use gtr::decoder::{PredictionSet, PredictionVars};
use gtr::matching::{
    giou_1d, match_slot, rank, select, set_loss, set_loss_value, MatchConfig, Segment,
};
use gtr::tensor::{finite_difference_grad, max_gradient_error, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seg(a: f64, b: f64) -> Segment {
    Segment::new(a, b).unwrap()
}

fn arb_segment() -> impl Strategy<Value = Segment> {
    (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b)| seg(a.min(b), a.max(b)))
}

/// gIoU from an explicit enumeration of the covered pieces of the hull.
fn giou_oracle(a: &Segment, b: &Segment) -> f64 {
    let mut cuts = [a.start, a.end, b.start, b.end];
    cuts.sort_by(f64::total_cmp);
    let (mut inter, mut union) = (0.0, 0.0);
    for w in cuts.windows(2) {
        let mid = (w[0] + w[1]) / 2.0;
        let in_a = a.start <= mid && mid <= a.end;
        let in_b = b.start <= mid && mid <= b.end;
        let len = w[1] - w[0];
        if in_a && in_b {
            inter += len;
        }
        if in_a || in_b {
            union += len;
        }
    }
    let hull = cuts[3] - cuts[0];
    if union == 0.0 {
        return if hull == 0.0 { 1.0 } else { -1.0 };
    }
    inter / union - (hull - union) / hull
}

/// Every slot's cost, then the first index holding the minimum.
fn exhaustive_match(conf: &[f64], boxes: &[Segment], gt: &Segment, cfg: &MatchConfig) -> usize {
    let costs: Vec<f64> = conf
        .iter()
        .zip(boxes)
        .map(|(c, b)| {
            let l1 = (gt.start - b.start).abs() + (gt.end - b.end).abs();
            -c + cfg.lambda_l1 * l1 + cfg.lambda_iou * (1.0 - giou_oracle(gt, b))
        })
        .collect();
    let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    costs.iter().position(|&c| c == min).unwrap()
}

#[test]
fn giou_examples() {
    assert!((giou_1d(&seg(0.0, 0.2), &seg(0.5, 1.0)) + 0.3).abs() < 1e-12);
    assert!((giou_1d(&seg(0.1, 0.5), &seg(0.3, 0.7)) - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(giou_1d(&seg(0.3, 0.3), &seg(0.3, 0.3)), 1.0);
    assert_eq!(giou_1d(&seg(0.3, 0.3), &seg(0.6, 0.6)), -1.0);
}

#[test]
fn set_loss_examples() {
    let cfg = MatchConfig::default();
    let gt = seg(0.2, 0.6);
    let half = PredictionSet {
        boxes: vec![[0.4, 0.4]],
        confidence: vec![0.5],
    };
    let (l, i) = set_loss_value(&half, &gt, &cfg);
    assert_eq!(i, 0);
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    let perfect = PredictionSet {
        boxes: vec![[0.4, 0.4], [0.9, 0.1]],
        confidence: vec![1.0, 0.3],
    };
    assert!(set_loss_value(&perfect, &gt, &cfg).0 < 1e-6);
}

#[test]
fn set_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = MatchConfig {
        lambda_bg: 0.3,
        ..MatchConfig::default()
    };
    let mut checked = 0;
    while checked < 50 {
        let n = rng.random_range(1..6);
        let boxes = Tensor::from_fn(&[n, 2], |_| rng.random_range(0.1..0.9));
        let conf = Tensor::from_fn(&[n, 1], |_| rng.random_range(0.05..0.95));
        let a: f64 = rng.random_range(0.0..0.8);
        let gt = seg(a, a + rng.random_range(0.05..0.2));

        let value = |b: &Tensor<f64>, c: &Tensor<f64>| {
            let p = PredictionSet {
                boxes: (0..n).map(|i| [b.at(i, 0), b.at(i, 1)]).collect(),
                confidence: c.data().to_vec(),
            };
            set_loss_value(&p, &gt, &cfg)
        };
        let (_, base) = value(&boxes, &conf);
        // Skip instances where the probes would change the matched slot or
        // cross a clamp or absolute-value kink.
        let h = 1e-6;
        let stable = (0..2 * n).all(|k| {
            let mut b = boxes.clone();
            b.data_mut()[k] += 10.0 * h;
            let up = value(&b, &conf).1;
            b.data_mut()[k] -= 20.0 * h;
            up == base && value(&b, &conf).1 == base
        });
        let s = p_start(&boxes, base);
        let e = p_end(&boxes, base);
        let away = |x: f64, k: f64| (x - k).abs() > 1e-4;
        if !stable
            || !away(s, 0.0)
            || !away(e, 1.0)
            || !away(s, gt.start)
            || !away(e, gt.end)
            || !away(e, gt.start)
            || !away(s, gt.end)
        {
            continue;
        }

        let mut g = Graph::<f64>::new();
        let bv = g.leaf(&boxes.clone().with_requires_grad(true));
        let cv = g.leaf(&conf.clone().with_requires_grad(true));
        let (l, i) = set_loss(
            &mut g,
            &PredictionVars {
                boxes: bv,
                confidence: cv,
            },
            &gt,
            &cfg,
        )
        .unwrap();
        assert_eq!(i, base);
        assert!((g.item(l) - value(&boxes, &conf).0).abs() < 1e-12);
        g.backward(l).unwrap();
        let (db, dc) = (g.grad(bv).unwrap(), g.grad(cv).unwrap());

        let nb = finite_difference_grad(|b| value(b, &conf).0, &boxes, h);
        let nc = finite_difference_grad(|c| value(&boxes, c).0, &conf, h);
        assert!(max_gradient_error(&db, nb.data(), 1e-6).within(1e-5, 1e-7));
        assert!(max_gradient_error(&dc, nc.data(), 1e-6).within(1e-5, 1e-7));
        checked += 1;
    }
}

fn p_start(b: &Tensor<f64>, i: usize) -> f64 {
    b.at(i, 0) - b.at(i, 1) / 2.0
}

fn p_end(b: &Tensor<f64>, i: usize) -> f64 {
    b.at(i, 0) + b.at(i, 1) / 2.0
}

#[test]
fn match_examples() {
    let gt = seg(0.2, 0.6);
    let cfg = MatchConfig::default();
    assert_eq!(match_slot(&[0.2, 0.9, 0.5], &[gt; 3], &gt, &cfg), 1);
    assert_eq!(match_slot(&[0.99], &[seg(0.0, 0.05)], &gt, &cfg), 0);
    assert_eq!(select(&[0.1, 0.9]), 1);
    assert_eq!(select(&[0.4]), 0);
}

proptest! {
    #[test]
    fn linear_scan_equals_exhaustive_minimum(
        slots in prop::collection::vec((0.0f64..=1.0, arb_segment()), 1..12),
        gt in arb_segment(),
        l1 in 0.0f64..10.0,
        iou in 0.0f64..10.0,
    ) {
        prop_assume!(l1 + iou > 0.0);
        let cfg = MatchConfig { lambda_l1: l1, lambda_iou: iou, lambda_bg: 0.0 };
        let (conf, boxes): (Vec<f64>, Vec<Segment>) = slots.into_iter().unzip();
        prop_assert_eq!(match_slot(&conf, &boxes, &gt, &cfg), exhaustive_match(&conf, &boxes, &gt, &cfg));
    }

    #[test]
    fn ties_go_to_lowest_index(c in 0.0f64..1.0, n in 1usize..8, gt in arb_segment(), b in arb_segment()) {
        prop_assert_eq!(match_slot(&vec![c; n], &vec![b; n], &gt, &MatchConfig::default()), 0);
    }

    #[test]
    fn giou_properties(a in arb_segment(), b in arb_segment()) {
        let v = giou_1d(&a, &b);
        prop_assert!(v > -1.0 || (a.len() == 0.0 && b.len() == 0.0));
        prop_assert!(v <= 1.0);
        prop_assert_eq!(v, giou_1d(&b, &a));
        prop_assert!((v - giou_oracle(&a, &b)).abs() < 1e-12);
        let hull = a.end.max(b.end) - a.start.min(b.start);
        let union = a.len() + b.len() - a.intersection(&b);
        if union > 0.0 && (hull - union).abs() == 0.0 {
            prop_assert!((v - a.iou(&b)).abs() < 1e-12);
        }
    }

    #[test]
    fn set_loss_is_nonnegative_and_decreasing_in_matched_confidence(
        slots in prop::collection::vec((0.01f64..0.99, 0.05f64..0.95, 0.05f64..0.9), 1..6),
        gt in arb_segment(),
        bg in 0.0f64..1.0,
    ) {
        let cfg = MatchConfig { lambda_bg: bg, ..MatchConfig::default() };
        let p = PredictionSet {
            boxes: slots.iter().map(|s| [s.1, s.2]).collect(),
            confidence: slots.iter().map(|s| s.0).collect(),
        };
        let (l, i) = set_loss_value(&p, &gt, &cfg);
        prop_assert!(l >= 0.0);
        let mut q = p.clone();
        q.confidence[i] = (q.confidence[i] + 0.5) / 1.5;
        let (l2, j) = set_loss_value(&q, &gt, &cfg);
        prop_assert_eq!(i, j);
        prop_assert!(l2 < l);
    }

    #[test]
    fn ranking_is_a_permutation(conf in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let mut r = rank(&conf);
        for w in r.windows(2) {
            prop_assert!(conf[w[0]] >= conf[w[1]]);
        }
        prop_assert_eq!(r[0], select(&conf));
        r.sort();
        prop_assert_eq!(r, (0..conf.len()).collect::<Vec<_>>());
    }
}
