//! The full grounding model: cubic embedding + video encoder, word
//! embedding + BiGRU + text encoder + projection, segment queries, the
//! cross-modal decoder and the prediction heads.

use std::path::Path;

use crate::config::ModelConfig;
use crate::data::{vocabulary, GroundingSample};
use crate::decoder::{AttentionBlock, Decoder, PredictionHeads, PredictionSet, PredictionVars};
use crate::error::{GtrError, Result};
use crate::init::xavier_init;
use crate::nn::{Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::{Element, Var};
use crate::text::{embed, load_embeddings, BiGru, Vocab};
use crate::transformer::{project_text, EncoderStack, FeedForward, TextProjection};
use crate::video::{add_positional, sample_frames, CubicEmbedding, VideoClip};

#[derive(Debug, Clone)]
pub struct Gtr<E: Element> {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<E>,
    pub cubic: CubicEmbedding,
    pub video_encoder: EncoderStack,
    pub word_table: ParamId,
    pub gru: BiGru,
    pub text_encoder: EncoderStack,
    pub text_proj: TextProjection,
    /// Learnable segment queries `[N × d]`.
    pub queries: ParamId,
    pub decoder: Decoder,
    pub heads: PredictionHeads,
}

/// Intermediate tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Contextualized visual tokens `[F × d]`.
    pub video: Var,
    /// Contextualized, projected text tokens `[S × d]`.
    pub text: Var,
    pub decoded: Var,
    pub preds: PredictionVars,
}

impl<E: Element> Gtr<E> {
    /// Register all parameters with their default fills (no random init).
    pub fn build(cfg: &ModelConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        if vocab.len() > cfg.vocab_size {
            return Err(GtrError::Config(format!(
                "vocabulary has {} words but vocab_size is {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        let d = cfg.d;
        let ffn = cfg.ffn_mult * d;
        let ds = cfg.text_dim();
        let mut store = ParamStore::new();
        let cubic = CubicEmbedding::new(&mut store, cfg.cubic()?);
        let video_encoder = EncoderStack::new(
            &mut store,
            "video_encoder",
            cfg.video_layers,
            d,
            cfg.encoder_heads,
            ffn,
        )?;
        let word_table = store.add(
            "word_table",
            ParamKind::Embedding,
            &[cfg.vocab_size, cfg.word_dim],
        );
        let gru = BiGru::new(&mut store, "gru", cfg.word_dim, cfg.gru_hidden);
        let text_encoder = EncoderStack::new(
            &mut store,
            "text_encoder",
            cfg.text_layers,
            ds,
            cfg.encoder_heads,
            cfg.ffn_mult * ds,
        )?;
        let text_proj = FeedForward::new(&mut store, "text_proj", ds, cfg.text_ffn_dim, d);
        let queries = store.add("queries", ParamKind::Weight, &[cfg.queries, d]);
        let decoder = Decoder::new(&mut store, &cfg.fusion_config()?, d, ffn)?;
        let heads = PredictionHeads::new(&mut store, d);
        if !cfg.finetune_embeddings {
            store.set_trainable(word_table, false);
        }
        Ok(Gtr {
            cfg: cfg.clone(),
            vocab,
            store,
            cubic,
            video_encoder,
            word_table,
            gru,
            text_encoder,
            text_proj,
            queries,
            decoder,
            heads,
        })
    }

    /// Build and randomly initialize from `cfg.seed`. Word vectors from
    /// `cfg.embeddings`, if set, overwrite the matching table rows.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let table = cfg
            .embeddings
            .as_deref()
            .map(|p| load_embeddings(Path::new(p)))
            .transpose()?;
        let vocab = table.as_ref().map_or_else(vocabulary, |t| t.vocab.clone());
        let mut model = Self::build(cfg, vocab)?;
        xavier_init(&mut model.store, cfg.seed);
        if let Some(t) = table {
            if t.dim() != cfg.word_dim {
                return Err(GtrError::Config(format!(
                    "embedding file has dimension {}, word_dim is {}",
                    t.dim(),
                    cfg.word_dim
                )));
            }
            let dst = model.store.get_mut(model.word_table).data_mut();
            dst[..t.matrix.numel()]
                .iter_mut()
                .zip(t.matrix.data())
                .for_each(|(d, &s)| *d = E::of(s as f64));
        }
        Ok(model)
    }

    pub fn encode_query(&self, text: &str) -> Vec<usize> {
        self.vocab.encode(text)
    }

    /// Run the whole model on the tape of `cx`.
    pub fn forward(
        &self,
        cx: &mut Ctx<'_, E>,
        clip: &VideoClip,
        ids: &[usize],
    ) -> Result<ForwardVars> {
        if ids.is_empty() || ids.len() > self.cfg.max_query_len {
            return Err(GtrError::contract(format!(
                "query must have 1..={} tokens, got {}",
                self.cfg.max_query_len,
                ids.len()
            )));
        }
        let clip = sample_frames(clip, self.cfg.sample_rate)?;
        let grid = self.cubic.embed_standardized(cx, &clip)?;
        let v = add_positional(cx, grid.embeddings)?;
        let video = self.video_encoder.encode(cx, v)?;

        let words = embed(cx, self.word_table, ids)?;
        let s = self.gru.forward(cx, words)?;
        let s = add_positional(cx, s)?;
        let s = self.text_encoder.encode(cx, s)?;
        let text = project_text(cx, s, &self.text_proj)?;

        let q = cx.p(self.queries);
        let decoded = self.decoder.decode(cx, q, video, text)?;
        let preds = self.heads.forward(cx, decoded)?;
        Ok(ForwardVars {
            video,
            text,
            decoded,
            preds,
        })
    }

    pub fn predict(&self, clip: &VideoClip, ids: &[usize]) -> Result<PredictionSet> {
        let mut cx = Ctx::new(&self.store);
        let out = self.forward(&mut cx, clip, ids)?;
        Ok(PredictionSet::from_vars(&cx.g, &out.preds))
    }

    pub fn predict_sample(&self, sample: &GroundingSample) -> Result<PredictionSet> {
        self.predict(&sample.clip, &sample.query_ids)
    }

    /// Head-averaged cross-modal attention blocks of decoder layer `layer`.
    pub fn attention(
        &self,
        clip: &VideoClip,
        ids: &[usize],
        layer: usize,
    ) -> Result<Vec<AttentionBlock>> {
        if layer >= self.decoder.layers.len() {
            return Err(GtrError::contract(format!(
                "layer {layer} out of range for {} decoder layers",
                self.decoder.layers.len()
            )));
        }
        let mut cx = Ctx::new(&self.store).with_attention_trace();
        self.forward(&mut cx, clip, ids)?;
        Ok(cx
            .attention
            .unwrap_or_default()
            .into_iter()
            .filter(|b| b.layer == layer)
            .collect())
    }

    pub fn num_params(&self) -> usize {
        self.store
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }
}
