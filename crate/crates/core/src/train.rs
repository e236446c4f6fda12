//! Training loop: batch forward, averaged set loss, backward, AdamW.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_model;
use crate::config::ModelConfig;
use crate::data::{augment, AugmentFlags, GroundingSample};
use crate::error::{GtrError, Result};
use crate::matching::set_loss;
use crate::model::Gtr;
use crate::nn::Ctx;
use crate::optim::{AdamW, AdamWConfig};

/// Stream salt so batch order and augmentation draws do not reuse the
/// initialization stream.
const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0001;

pub struct Trainer {
    pub model: Gtr<f32>,
    pub opt: AdamW,
    pub samples: Vec<GroundingSample>,
    pub step: u64,
    /// `(step, loss)` for every completed step.
    pub trace: Vec<(u64, f64)>,
    flags: AugmentFlags,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

pub fn adamw_config(cfg: &ModelConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    }
}

impl Trainer {
    pub fn new(cfg: &ModelConfig, samples: Vec<GroundingSample>) -> Result<Self> {
        Self::from_model(Gtr::new(cfg)?, samples, 0)
    }

    /// Continue training `model`, whose optimizer moments start from zero.
    pub fn from_model(model: Gtr<f32>, samples: Vec<GroundingSample>, step: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(GtrError::contract("training needs at least one sample"));
        }
        let opt = AdamW::new(adamw_config(&model.cfg), &model.store);
        let rng = ChaCha8Rng::seed_from_u64(model.cfg.seed ^ TRAIN_STREAM);
        let flags = AugmentFlags::from_config(&model.cfg);
        Ok(Trainer {
            model,
            opt,
            samples,
            step,
            trace: Vec::new(),
            flags,
            rng,
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Indices of the next batch; the sample order is reshuffled every epoch.
    fn next_batch(&mut self) -> Vec<usize> {
        (0..self.model.cfg.batch)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order = (0..self.samples.len()).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// One optimizer step. Returns the batch-mean loss before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.next_batch();
        let inputs: Vec<GroundingSample> = batch
            .iter()
            .map(|&i| augment(&self.samples[i], self.flags, &mut self.rng))
            .collect();
        let mcfg = self.model.cfg.match_config();
        let mut cx = Ctx::new(&self.model.store);
        let mut total = None;
        for s in &inputs {
            let out = self.model.forward(&mut cx, &s.clip, &s.query_ids)?;
            let (l, _) = set_loss(&mut cx.g, &out.preds, &s.gt, &mcfg)?;
            total = Some(match total {
                None => l,
                Some(t) => cx.g.add(t, l)?,
            });
        }
        let total = total.expect("batch is nonempty");
        let loss = cx.g.scale(total, 1.0 / inputs.len() as f64);
        let value = cx.g.item(loss) as f64;
        if !value.is_finite() {
            return Err(GtrError::Divergence {
                step: self.step as usize,
                loss: value,
            });
        }
        cx.g.backward(loss)?;
        let grads = cx.param_grads();
        drop(cx);
        self.opt.step(&mut self.model.store, &grads)?;
        self.trace.push((self.step, value));
        self.step += 1;
        Ok(value)
    }

    /// Run up to `steps` steps. `on_step(trainer, loss)` runs after each step
    /// and may return `false` to stop early.
    pub fn run(
        &mut self,
        steps: u64,
        mut on_step: impl FnMut(&Trainer, f64) -> Result<bool>,
    ) -> Result<()> {
        for _ in 0..steps {
            let loss = self.train_step()?;
            debug!("step {} loss {loss}", self.step - 1);
            if !on_step(self, loss)? {
                break;
            }
        }
        Ok(())
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.trace {
            let _ = writeln!(s, "{step},{loss}");
        }
        s
    }
}

/// Path of the loss trace written next to a checkpoint.
pub fn trace_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".loss.csv");
    PathBuf::from(name)
}

/// Train for `steps` steps, saving the checkpoint to `out` every
/// `checkpoint_every` steps (when nonzero) and at the end, and the loss
/// trace to [`trace_path`]`(out)`.
pub fn train(
    cfg: &ModelConfig,
    samples: Vec<GroundingSample>,
    steps: u64,
    out: &Path,
) -> Result<Trainer> {
    let mut t = Trainer::new(cfg, samples)?;
    let every = cfg.checkpoint_every as u64;
    t.run(steps, |t, loss| {
        if every > 0 && t.step % every == 0 {
            info!("step {} loss {loss}: checkpoint", t.step);
            save_model(out, &t.model, t.step)?;
        }
        Ok(true)
    })?;
    save_model(out, &t.model, t.step)?;
    fs::write(trace_path(out), t.trace_csv())?;
    Ok(t)
}
