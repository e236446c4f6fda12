//! Whole-model gradient check at 64-bit precision.
//!
//! Central differences are only a valid reference where the loss is smooth
//! on `[θ − h, θ + h]`. The tape hashes every piecewise branch (relu, clamp,
//! abs, min/max, the matched slot); elements whose `±h` probes land on a
//! different piece than the unperturbed pass fall back to a second-order
//! one-sided stencil on the smooth side, and are counted separately (not
//! compared) when both sides cross.

use crate::config::ModelConfig;
use crate::data::{gen_synthetic, vocabulary, DataSpec, GroundingSample};
use crate::decoder::FusionMode;
use crate::error::Result;
use crate::matching::{set_loss, MatchConfig};
use crate::model::Gtr;
use crate::nn::Ctx;
use crate::tensor::{max_gradient_error, GradError};

/// Central-difference step used by [`model_gradient_check`].
pub const FD_STEP: f64 = 1e-4;
/// Elements with `|analytic| <` this floor are judged by absolute error.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamGradCheck {
    pub name: String,
    pub error: GradError,
    /// Elements checked with a one-sided stencil.
    pub one_sided: usize,
    /// Elements skipped because both sides crossed a kink.
    pub kinked: usize,
}

#[derive(Debug, Clone)]
pub struct ModelGradReport {
    pub mode: FusionMode,
    /// Over all compared elements.
    pub overall: GradError,
    pub per_param: Vec<ParamGradCheck>,
    pub one_sided: usize,
    /// Total elements skipped because both sides crossed a kink.
    pub kinked: usize,
    pub loss: f64,
}

impl ModelGradReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.overall.within(rel_tol, abs_tol)
    }

    /// The parameter with the largest relative error.
    pub fn worst(&self) -> Option<&ParamGradCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.error.max_rel.total_cmp(&b.error.max_rel))
    }
}

/// The toy configuration with the given fusion mode and a nonzero
/// background weight, so every loss term is exercised.
pub fn gradcheck_config(mode: FusionMode) -> ModelConfig {
    ModelConfig {
        fusion: mode,
        lambda_bg: 0.1,
        ..ModelConfig::toy()
    }
}

/// One synthetic toy sample with a five-token query.
pub fn gradcheck_sample(cfg: &ModelConfig, seed: u64) -> Result<(GroundingSample, Vec<usize>)> {
    let s = gen_synthetic(1, &DataSpec::from_config(cfg), seed)?.remove(0);
    let ids = vocabulary().encode(&format!("a {} here", s.query));
    Ok((s, ids))
}

/// Loss value and branch signature of one forward pass.
fn probe(
    model: &Gtr<f64>,
    s: &GroundingSample,
    ids: &[usize],
    mcfg: &MatchConfig,
) -> Result<(f64, u64)> {
    let mut cx = Ctx::new(&model.store);
    cx.g.track_branches();
    let out = model.forward(&mut cx, &s.clip, ids)?;
    let (l, _) = set_loss(&mut cx.g, &out.preds, &s.gt, mcfg)?;
    Ok((cx.g.item(l), cx.g.branch_signature().unwrap_or(0)))
}

/// Compare analytic gradients of the set loss for every parameter of a
/// randomly initialized toy model against central finite differences.
pub fn model_gradient_check(mode: FusionMode, seed: u64) -> Result<ModelGradReport> {
    model_gradient_check_with_step(mode, seed, FD_STEP)
}

#[allow(clippy::needless_range_loop)]
pub fn model_gradient_check_with_step(
    mode: FusionMode,
    seed: u64,
    h: f64,
) -> Result<ModelGradReport> {
    let cfg = ModelConfig {
        seed,
        ..gradcheck_config(mode)
    };
    let mut model = Gtr::<f64>::new(&cfg)?;
    let (sample, ids) = gradcheck_sample(&cfg, seed)?;
    let mcfg = cfg.match_config();

    let (loss, analytic) = {
        let mut cx = Ctx::new(&model.store);
        let out = model.forward(&mut cx, &sample.clip, &ids)?;
        let (l, _) = set_loss(&mut cx.g, &out.preds, &sample.gt, &mcfg)?;
        let loss = cx.g.item(l);
        cx.g.backward(l)?;
        (loss, cx.param_grads())
    };
    let (_, base_sig) = probe(&model, &sample, &ids, &mcfg)?;

    let mut per_param = Vec::new();
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let (mut one_sided_total, mut kinked_total) = (0, 0);
    for i in 0..model.store.len() {
        let entry = &model.store.entries()[i];
        if !entry.trainable {
            continue;
        }
        let name = entry.name.clone();
        let n = entry.tensor.numel();
        let grad = analytic[i].clone().unwrap_or_else(|| vec![0.0; n]);
        let id = model.store.id(&name).expect("registered");
        let (mut a, mut num) = (Vec::new(), Vec::new());
        let (mut one_sided, mut kinked) = (0, 0);
        for j in 0..n {
            let orig = model.store.get(id).data()[j];
            let mut at = |offset: f64| -> Result<(f64, bool)> {
                model.store.get_mut(id).data_mut()[j] = orig + offset;
                let (f, sig) = probe(&model, &sample, &ids, &mcfg)?;
                model.store.get_mut(id).data_mut()[j] = orig;
                Ok((f, sig == base_sig))
            };
            let (up, up_ok) = at(h)?;
            let (down, down_ok) = at(-h)?;
            let estimate = if up_ok && down_ok {
                Some((up - down) / (2.0 * h))
            } else {
                one_sided += 1;
                let side = if up_ok { h } else { -h };
                let (f1, f2) = if up_ok {
                    (up, at(2.0 * h)?)
                } else {
                    (down, at(-2.0 * h)?)
                };
                ((up_ok || down_ok) && f2.1).then(|| (4.0 * f1 - 3.0 * loss - f2.0) / (2.0 * side))
            };
            match estimate {
                Some(v) => {
                    a.push(grad[j]);
                    num.push(v);
                }
                None => {
                    one_sided -= 1;
                    kinked += 1;
                }
            }
        }
        per_param.push(ParamGradCheck {
            name,
            error: max_gradient_error(&a, &num, ABS_FLOOR),
            one_sided,
            kinked,
        });
        one_sided_total += one_sided;
        kinked_total += kinked;
        all_a.extend(a);
        all_n.extend(num);
    }
    Ok(ModelGradReport {
        mode,
        overall: max_gradient_error(&all_a, &all_n, ABS_FLOOR),
        per_param,
        one_sided: one_sided_total,
        kinked: kinked_total,
        loss,
    })
}
