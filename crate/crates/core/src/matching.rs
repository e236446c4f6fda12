//! Many-to-one matching of one ground-truth segment against `N` predicted
//! slots, the set loss on the matched slot, 1-D generalized IoU and the
//! inference selection rule.

use crate::decoder::{PredictionSet, PredictionVars};
use crate::error::{GtrError, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Confidences are clamped to `[CONF_EPS, 1 − CONF_EPS]` before taking logs.
pub const CONF_EPS: f64 = 1e-7;

/// A normalized time interval, `0 ≤ start ≤ end ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(0.0 <= start && start <= end && end <= 1.0) {
            return Err(GtrError::contract(format!(
                "invalid segment [{start}, {end}]"
            )));
        }
        Ok(Segment { start, end })
    }

    /// `(c − w/2, c + w/2)` clipped to `[0, 1]`.
    pub fn from_center_width(center: f64, width: f64) -> Self {
        let start = (center - width / 2.0).clamp(0.0, 1.0);
        let end = (center + width / 2.0).clamp(0.0, 1.0);
        Segment {
            start,
            end: end.max(start),
        }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        (self.start + self.end) / 2.0
    }

    pub fn intersection(&self, other: &Segment) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    /// Plain IoU; two identical zero-length segments have IoU 1.
    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.intersection(other);
        let union = self.len() + other.len() - inter;
        if union > 0.0 {
            inter / union
        } else if self == other {
            1.0
        } else {
            0.0
        }
    }
}

/// `|a∩b|/|a∪b| − |C∖(a∪b)|/|C|` with `C` the smallest interval covering both.
pub fn giou_1d(a: &Segment, b: &Segment) -> f64 {
    let inter = a.intersection(b);
    let union = a.len() + b.len() - inter;
    let hull = a.end.max(b.end) - a.start.min(b.start);
    if union <= 0.0 {
        // Both segments are points; identical points are a perfect match.
        return if hull <= 0.0 { 1.0 } else { -1.0 };
    }
    inter / union - (hull - union) / hull
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub lambda_l1: f64,
    pub lambda_iou: f64,
    /// Weight of the `−log(1 − ĉ)` push-down on unmatched slots. Zero leaves
    /// unmatched slots unsupervised.
    pub lambda_bg: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            lambda_l1: 5.0,
            lambda_iou: 2.0,
            lambda_bg: 0.0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_l1, self.lambda_iou, self.lambda_bg];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || self.lambda_l1 + self.lambda_iou <= 0.0
        {
            return Err(GtrError::Config(format!(
                "loss weights must be nonnegative with lambda_l1 + lambda_iou > 0, got {ws:?}"
            )));
        }
        Ok(())
    }
}

/// `λ_l1·‖b − b̂‖₁ + λ_iou·(1 − gIoU(b, b̂))`.
pub fn box_cost(b: &Segment, b_hat: &Segment, cfg: &MatchConfig) -> f64 {
    let l1 = (b.start - b_hat.start).abs() + (b.end - b_hat.end).abs();
    cfg.lambda_l1 * l1 + cfg.lambda_iou * (1.0 - giou_1d(b, b_hat))
}

/// Slot minimizing `−ĉ_i + C_box(b, b̂_i)`; ties go to the lowest index.
pub fn match_slot(
    confidence: &[f64],
    segments: &[Segment],
    gt: &Segment,
    cfg: &MatchConfig,
) -> usize {
    assert!(!confidence.is_empty() && confidence.len() == segments.len());
    let mut best = (0, f64::INFINITY);
    for (i, (c, s)) in confidence.iter().zip(segments).enumerate() {
        let cost = -c + box_cost(gt, s, cfg);
        if cost < best.1 {
            best = (i, cost);
        }
    }
    best.0
}

pub fn match_prediction(preds: &PredictionSet, gt: &Segment, cfg: &MatchConfig) -> usize {
    match_slot(&preds.confidence, &preds.segments(), gt, cfg)
}

/// Slot indices sorted by descending confidence, ties by lowest index.
pub fn rank(confidence: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidence.len()).collect();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]));
    order
}

/// Index of the most confident slot.
pub fn select(confidence: &[f64]) -> usize {
    rank(confidence)[0]
}

/// Set loss on the tape for one sample. The matched slot is found on the
/// current values and then held fixed; gradients flow only through the
/// confidences and boxes.
pub fn set_loss<E: Element>(
    g: &mut Graph<E>,
    preds: &PredictionVars,
    gt: &Segment,
    cfg: &MatchConfig,
) -> Result<(Var, usize)> {
    let n = g.shape(preds.confidence)[0];
    if g.shape(preds.boxes) != [n, 2] || g.shape(preds.confidence) != [n, 1] || n == 0 {
        return Err(GtrError::dim(
            "set_loss",
            g.shape(preds.boxes),
            g.shape(preds.confidence),
        ));
    }
    let i = match_prediction(&PredictionSet::from_vars(g, preds), gt, cfg);
    g.note_branch(i as u64);

    let conf = g.clamp(preds.confidence, CONF_EPS, 1.0 - CONF_EPS);
    let matched = g.slice(conf, 0, i, 1)?;
    let nll = g.log(matched);
    let mut loss = g.neg(nll);

    let b = g.slice(preds.boxes, 0, i, 1)?;
    let c = g.slice(b, 1, 0, 1)?;
    let w = g.slice(b, 1, 1, 1)?;
    let half = g.scale(w, 0.5);
    let s = g.sub(c, half)?;
    let s = g.clamp(s, 0.0, 1.0);
    let e = g.add(c, half)?;
    let e = g.clamp(e, 0.0, 1.0);
    let cost = box_cost_var(g, s, e, gt, cfg)?;
    loss = g.add(loss, cost)?;

    if cfg.lambda_bg > 0.0 && n > 1 {
        let one_minus = g.neg(conf);
        let one_minus = g.add_scalar(one_minus, 1.0);
        let logs = g.log(one_minus);
        let mut mask = vec![E::one(); n];
        mask[i] = E::zero();
        let mask = g.constant(Tensor::new(vec![n, 1], mask)?);
        let masked = g.mul(logs, mask)?;
        let bg = g.sum(masked);
        let bg = g.scale(bg, -cfg.lambda_bg);
        let bg = g.reshape(bg, &[1, 1])?;
        loss = g.add(loss, bg)?;
    }
    let loss = g.reshape(loss, &[])?;
    Ok((loss, i))
}

/// `[1×1]` box cost between a predicted `(s, e)` on the tape and a fixed `gt`.
fn box_cost_var<E: Element>(
    g: &mut Graph<E>,
    s: Var,
    e: Var,
    gt: &Segment,
    cfg: &MatchConfig,
) -> Result<Var> {
    let gs = g.constant(Tensor::from_f64(&[1, 1], &[gt.start])?);
    let ge = g.constant(Tensor::from_f64(&[1, 1], &[gt.end])?);
    let ds = g.sub(s, gs)?;
    let ds = g.abs(ds);
    let de = g.sub(e, ge)?;
    let de = g.abs(de);
    let l1 = g.add(ds, de)?;
    let l1 = g.scale(l1, cfg.lambda_l1);

    let pred_len = g.sub(e, s)?;
    let lo = g.maximum(s, gs)?;
    let hi = g.minimum(e, ge)?;
    let inter = g.sub(hi, lo)?;
    let inter = g.relu(inter);
    let union = g.add_scalar(pred_len, gt.len());
    let union = g.sub(union, inter)?;
    let hull_lo = g.minimum(s, gs)?;
    let hull_hi = g.maximum(e, ge)?;
    let hull = g.sub(hull_hi, hull_lo)?;

    let union_v = g.item(union).f64();
    let hull_v = g.item(hull).f64();
    g.note_branch(u64::from(union_v <= 0.0));
    let giou = if union_v <= 0.0 {
        // Point-vs-point: no usable gradient, use the defined value.
        let v = if hull_v <= 0.0 { 1.0 } else { -1.0 };
        g.constant(Tensor::from_f64(&[1, 1], &[v])?)
    } else {
        let iou = g.div(inter, union)?;
        let gap = g.sub(hull, union)?;
        let frac = g.div(gap, hull)?;
        g.sub(iou, frac)?
    };
    let giou_cost = g.neg(giou);
    let giou_cost = g.add_scalar(giou_cost, 1.0);
    let giou_cost = g.scale(giou_cost, cfg.lambda_iou);
    g.add(l1, giou_cost)
}

/// Loss value without a tape, for reporting.
pub fn set_loss_value(preds: &PredictionSet, gt: &Segment, cfg: &MatchConfig) -> (f64, usize) {
    let i = match_prediction(preds, gt, cfg);
    let clamp = |c: f64| c.clamp(CONF_EPS, 1.0 - CONF_EPS);
    let mut loss = -clamp(preds.confidence[i]).ln() + box_cost(gt, &preds.segment(i), cfg);
    if cfg.lambda_bg > 0.0 {
        let bg: f64 = (0..preds.len())
            .filter(|&j| j != i)
            .map(|j| -(1.0 - clamp(preds.confidence[j])).ln())
            .sum();
        loss += cfg.lambda_bg * bg;
    }
    (loss, i)
}
