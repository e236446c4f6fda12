//! Recall metrics `R@n, IoU@m` and single-stream throughput.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::GroundingSample;
use crate::error::{GtrError, Result};
use crate::matching::{rank, Segment};
use crate::model::Gtr;
use crate::tensor::Element;

pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// `rNN_iouMM` is the fraction of samples whose `NN` most confident
/// predictions include one with IoU strictly greater than `0.MM`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r1_iou03: f64,
    pub r1_iou05: f64,
    pub r1_iou07: f64,
    pub r5_iou03: f64,
    pub r5_iou05: f64,
    pub r5_iou07: f64,
    /// Mean IoU of the top-1 prediction.
    pub mean_iou: f64,
    /// Samples per second of forward time.
    pub qps: f64,
}

/// Fraction of samples with an IoU `> m` among the first `n` entries.
pub fn recall_at(ranked_ious: &[Vec<f64>], n: usize, m: f64) -> f64 {
    if ranked_ious.is_empty() {
        return 0.0;
    }
    let hits = ranked_ious
        .iter()
        .filter(|ious| ious.iter().take(n).any(|&v| v > m))
        .count();
    hits as f64 / ranked_ious.len() as f64
}

impl MetricReport {
    /// `ranked_ious[k]` lists sample `k`'s prediction IoUs in confidence order.
    pub fn from_ranked_ious(ranked_ious: &[Vec<f64>], forward_secs: f64) -> Self {
        let r = |n, m| recall_at(ranked_ious, n, m);
        let count = ranked_ious.len() as f64;
        let mean_iou = if ranked_ious.is_empty() {
            0.0
        } else {
            ranked_ious
                .iter()
                .map(|v| v.first().copied().unwrap_or(0.0))
                .sum::<f64>()
                / count
        };
        MetricReport {
            r1_iou03: r(1, 0.3),
            r1_iou05: r(1, 0.5),
            r1_iou07: r(1, 0.7),
            r5_iou03: r(5, 0.3),
            r5_iou05: r(5, 0.5),
            r5_iou07: r(5, 0.7),
            mean_iou,
            qps: if forward_secs > 0.0 {
                count / forward_secs
            } else {
                0.0
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

/// IoUs of all predictions against `gt`, most confident first.
pub fn ranked_ious(confidence: &[f64], segments: &[Segment], gt: &Segment) -> Vec<f64> {
    rank(confidence)
        .into_iter()
        .map(|i| segments[i].iou(gt))
        .collect()
}

/// Run the model on every sample, one at a time.
pub fn evaluate<E: Element>(model: &Gtr<E>, samples: &[GroundingSample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(GtrError::contract("evaluation needs at least one sample"));
    }
    let mut all = Vec::with_capacity(samples.len());
    let mut secs = 0.0;
    for s in samples {
        let t0 = Instant::now();
        let preds = model.predict_sample(s)?;
        secs += t0.elapsed().as_secs_f64();
        all.push(ranked_ious(&preds.confidence, &preds.segments(), &s.gt));
    }
    Ok(MetricReport::from_ranked_ious(&all, secs))
}
