//! Model, data and optimizer configuration.
//!
//! Files are line-oriented UTF-8 `key = value` pairs; `#` starts a comment.
//! A `preset = <name>` line (anywhere in the file) selects the base values
//! that the other lines override. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::decoder::{schedule, FusionConfig, FusionMode};
use crate::error::{GtrError, Result};
use crate::matching::MatchConfig;
use crate::video::CubicConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    /// Decoder head schedule: `columnar[:n]`, `shrink`, `expand` or a list.
    pub heads: String,
    pub encoder_heads: usize,
    pub queries: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub sample_rate: usize,
    pub fusion: FusionMode,
    pub vocab_size: usize,
    pub word_dim: usize,
    pub gru_hidden: usize,
    pub finetune_embeddings: bool,
    /// Optional word-vector file; replaces the synthetic vocabulary.
    pub embeddings: Option<String>,
    pub text_ffn_dim: usize,
    pub ffn_mult: usize,
    pub max_query_len: usize,
    pub dropout: f64,
    pub lambda_l1: f64,
    pub lambda_iou: f64,
    pub lambda_bg: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
    pub classes: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub augment_flip: bool,
    pub augment_crop: bool,
    pub augment_jitter: bool,
    pub checkpoint_every: usize,
}

pub const PRESETS: [&str; 5] = ["tiny", "toy", "gtr-b", "gtr-l", "gtr-h"];

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn tiny() -> Self {
        ModelConfig {
            d: 64,
            video_layers: 2,
            text_layers: 2,
            decoder_layers: 2,
            heads: "2,4".into(),
            encoder_heads: 4,
            queries: 8,
            frames: 24,
            height: 32,
            width: 32,
            kernel: [8, 8, 3],
            stride: [8, 8, 2],
            sample_rate: 1,
            fusion: FusionMode::Stepwise,
            vocab_size: 64,
            word_dim: 32,
            gru_hidden: 32,
            finetune_embeddings: true,
            embeddings: None,
            text_ffn_dim: 64,
            ffn_mult: 4,
            max_query_len: 32,
            dropout: 0.0,
            lambda_l1: 5.0,
            lambda_iou: 2.0,
            lambda_bg: 0.0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            batch: 8,
            seed: 0,
            classes: 8,
            train_samples: 64,
            eval_samples: 64,
            augment_flip: false,
            augment_crop: false,
            augment_jitter: false,
            checkpoint_every: 0,
        }
    }

    /// Gradient-check scale: `F = 12` visual tokens, `N = 4` queries.
    pub fn toy() -> Self {
        ModelConfig {
            d: 8,
            video_layers: 1,
            text_layers: 1,
            decoder_layers: 2,
            heads: "1,2".into(),
            encoder_heads: 2,
            queries: 4,
            frames: 7,
            height: 8,
            width: 8,
            kernel: [4, 4, 3],
            stride: [4, 4, 2],
            vocab_size: 16,
            word_dim: 4,
            gru_hidden: 2,
            text_ffn_dim: 8,
            batch: 2,
            train_samples: 4,
            eval_samples: 4,
            ..Self::tiny()
        }
    }

    fn full_scale(
        video_layers: usize,
        text_layers: usize,
        decoder_layers: usize,
        d: usize,
        heads: &str,
    ) -> Self {
        ModelConfig {
            d,
            video_layers,
            text_layers,
            decoder_layers,
            heads: heads.into(),
            encoder_heads: 8,
            frames: 512,
            height: 112,
            width: 112,
            sample_rate: 8,
            vocab_size: 10_000,
            word_dim: 300,
            gru_hidden: d / 2,
            text_ffn_dim: d,
            batch: 64,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.trim().to_lowercase().as_str() {
            "tiny" | "gtr-tiny" => Ok(Self::tiny()),
            "toy" | "gtr-toy" => Ok(Self::toy()),
            "gtr-b" => Ok(Self::full_scale(4, 4, 6, 320, "expand")),
            "gtr-l" => Ok(Self::full_scale(6, 6, 8, 320, "columnar:8")),
            "gtr-h" => Ok(Self::full_scale(8, 8, 8, 512, "columnar:8")),
            other => Err(GtrError::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn head_schedule(&self) -> Result<Vec<usize>> {
        schedule::parse(&self.heads, self.decoder_layers)
    }

    pub fn fusion_config(&self) -> Result<FusionConfig> {
        Ok(FusionConfig {
            mode: self.fusion,
            heads: self.head_schedule()?,
        })
    }

    pub fn cubic(&self) -> Result<CubicConfig> {
        CubicConfig::new(self.kernel, self.stride, self.d)
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            lambda_l1: self.lambda_l1,
            lambda_iou: self.lambda_iou,
            lambda_bg: self.lambda_bg,
        }
    }

    /// Width of the contextualized text tokens before projection.
    pub fn text_dim(&self) -> usize {
        2 * self.gru_hidden
    }

    /// Frame count after temporal sampling.
    pub fn sampled_frames(&self) -> usize {
        self.frames.div_ceil(self.sample_rate.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("video_layers", self.video_layers),
            ("text_layers", self.text_layers),
            ("decoder_layers", self.decoder_layers),
            ("queries", self.queries),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("sample_rate", self.sample_rate),
            ("vocab_size", self.vocab_size),
            ("word_dim", self.word_dim),
            ("gru_hidden", self.gru_hidden),
            ("text_ffn_dim", self.text_ffn_dim),
            ("ffn_mult", self.ffn_mult),
            ("max_query_len", self.max_query_len),
            ("batch", self.batch),
            ("classes", self.classes),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(GtrError::Config(format!("{k} must be positive")));
        }
        if !self.d.is_multiple_of(2) || !self.text_dim().is_multiple_of(2) {
            return Err(GtrError::Config(
                "positional encoding needs even widths".into(),
            ));
        }
        for (what, width) in [("d", self.d), ("text width", self.text_dim())] {
            if width % self.encoder_heads != 0 || self.encoder_heads == 0 {
                return Err(GtrError::Config(format!(
                    "encoder_heads {} does not divide {what} {width}",
                    self.encoder_heads
                )));
            }
        }
        if self.dropout != 0.0 {
            return Err(GtrError::Config(
                "dropout must be 0; training is deterministic".into(),
            ));
        }
        if self.classes > 32 {
            return Err(GtrError::Config("at most 32 synthetic classes".into()));
        }
        self.fusion_config()?.validate(self.d)?;
        self.match_config().validate()?;
        self.cubic()?
            .grid((self.sampled_frames(), self.height, self.width))?;
        let hp = [self.lr, self.eps, self.weight_decay];
        if hp.iter().any(|v| !v.is_finite() || *v < 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(GtrError::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| GtrError::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn triple(key: &str, v: &str) -> Result<[usize; 3]> {
            let parts: Vec<usize> = v
                .split(',')
                .map(|p| num(key, p.trim()))
                .collect::<Result<_>>()?;
            parts.try_into().map_err(|_| {
                GtrError::Config(format!("{key}: expected three comma-separated values"))
            })
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(GtrError::Config(format!(
                    "{key}: expected true/false, got {v:?}"
                ))),
            }
        }
        match key {
            "d" => self.d = num(key, value)?,
            "video_layers" => self.video_layers = num(key, value)?,
            "text_layers" => self.text_layers = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "heads" => self.heads = value.to_string(),
            "encoder_heads" => self.encoder_heads = num(key, value)?,
            "queries" => self.queries = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "kernel" => self.kernel = triple(key, value)?,
            "stride" => self.stride = triple(key, value)?,
            "sample_rate" => self.sample_rate = num(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "word_dim" => self.word_dim = num(key, value)?,
            "gru_hidden" => self.gru_hidden = num(key, value)?,
            "finetune_embeddings" => self.finetune_embeddings = flag(key, value)?,
            "embeddings" => self.embeddings = (!value.is_empty()).then(|| value.to_string()),
            "text_ffn_dim" => self.text_ffn_dim = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "max_query_len" => self.max_query_len = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "lambda_l1" => self.lambda_l1 = num(key, value)?,
            "lambda_iou" => self.lambda_iou = num(key, value)?,
            "lambda_bg" => self.lambda_bg = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "train_samples" => self.train_samples = num(key, value)?,
            "eval_samples" => self.eval_samples = num(key, value)?,
            "augment_flip" => self.augment_flip = flag(key, value)?,
            "augment_crop" => self.augment_crop = flag(key, value)?,
            "augment_jitter" => self.augment_jitter = flag(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(GtrError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a config file body. The result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| GtrError::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().rfind(|(_, k, _)| k == "preset") {
            Some((_, _, name)) => Self::preset(name)?,
            None => Self::tiny(),
        };
        for (line, k, v) in pairs.iter().filter(|(_, k, _)| k != "preset") {
            cfg.set(k, v).map_err(|e| GtrError::Parse {
                line: *line,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key, in a form `parse` reads back to an equal config.
    pub fn to_text(&self) -> String {
        let join = |a: [usize; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        let pairs: Vec<(&str, String)> = vec![
            ("d", self.d.to_string()),
            ("video_layers", self.video_layers.to_string()),
            ("text_layers", self.text_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("heads", self.heads.clone()),
            ("encoder_heads", self.encoder_heads.to_string()),
            ("queries", self.queries.to_string()),
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("kernel", join(self.kernel)),
            ("stride", join(self.stride)),
            ("sample_rate", self.sample_rate.to_string()),
            ("fusion", self.fusion.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("word_dim", self.word_dim.to_string()),
            ("gru_hidden", self.gru_hidden.to_string()),
            ("finetune_embeddings", self.finetune_embeddings.to_string()),
            ("embeddings", self.embeddings.clone().unwrap_or_default()),
            ("text_ffn_dim", self.text_ffn_dim.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("max_query_len", self.max_query_len.to_string()),
            ("dropout", self.dropout.to_string()),
            ("lambda_l1", self.lambda_l1.to_string()),
            ("lambda_iou", self.lambda_iou.to_string()),
            ("lambda_bg", self.lambda_bg.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("classes", self.classes.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("augment_flip", self.augment_flip.to_string()),
            ("augment_crop", self.augment_crop.to_string()),
            ("augment_jitter", self.augment_jitter.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
