//! Closed-form parameter and FLOP counts.
//!
//! FLOPs count `2·m·k·n` for every matrix product of one forward pass and
//! nothing else; element-wise work, softmax and norms are ignored.

use crate::config::ModelConfig;
use crate::decoder::FusionMode;
use crate::error::Result;
use crate::video::count_tokens;

fn lin(i: usize, o: usize) -> usize {
    i * o + o
}

fn mha_params(d: usize) -> usize {
    4 * lin(d, d)
}

fn encoder_layer_params(d: usize, ffn: usize) -> usize {
    mha_params(d) + lin(d, ffn) + lin(ffn, d) + 4 * d
}

/// Parameters of one MCMA block at width `d`.
pub fn mcma_params(mode: FusionMode, d: usize) -> usize {
    match mode {
        FusionMode::Joint => 6 * lin(d, d),
        FusionMode::Divided => 2 * mha_params(d) + 2,
        FusionMode::Hybrid | FusionMode::HybridValueSplit => 7 * lin(d, d),
        FusionMode::Stepwise | FusionMode::StepwiseLv => 2 * mha_params(d) + 2 * d,
        FusionMode::Early | FusionMode::Conditional => mha_params(d),
    }
}

/// Number of trainable scalars of the model described by `cfg`.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let d = cfg.d;
    let ds = cfg.text_dim();
    let hd = cfg.gru_hidden;
    let cubic = lin(cfg.cubic()?.patch_len(), d);
    let video = cfg.video_layers * encoder_layer_params(d, cfg.ffn_mult * d);
    let table = if cfg.finetune_embeddings {
        cfg.vocab_size * cfg.word_dim
    } else {
        0
    };
    let gru = 2 * (lin(cfg.word_dim, 3 * hd) + 3 * hd * hd);
    let text = cfg.text_layers * encoder_layer_params(ds, cfg.ffn_mult * ds);
    let proj = lin(ds, cfg.text_ffn_dim) + lin(cfg.text_ffn_dim, d);
    let queries = cfg.queries * d;
    let condition = if cfg.fusion == FusionMode::Conditional {
        lin(2 * d, d)
    } else {
        0
    };
    let layer = mha_params(d)
        + mcma_params(cfg.fusion, d)
        + lin(d, cfg.ffn_mult * d)
        + lin(cfg.ffn_mult * d, d)
        + 6 * d;
    let heads = 2 * lin(d, d) + lin(d, 2) + lin(d, 1);
    Ok(cubic
        + video
        + table
        + gru
        + text
        + proj
        + queries
        + condition
        + cfg.decoder_layers * layer
        + heads)
}

fn mm(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// Projections plus scores and weighted values, `Lq` queries over `Lk` keys.
fn mha_flops(lq: usize, lk: usize, d: usize) -> u64 {
    2 * mm(lq, d, d) + 2 * mm(lk, d, d) + 2 * mm(lq, d, lk)
}

fn encoder_flops(layers: usize, l: usize, d: usize, ffn: usize) -> u64 {
    layers as u64 * (mha_flops(l, l, d) + mm(l, d, ffn) + mm(l, ffn, d))
}

/// Visual token count `F` for the configured clip size.
pub fn visual_tokens(cfg: &ModelConfig) -> Result<usize> {
    count_tokens(&cfg.cubic()?, (cfg.sampled_frames(), cfg.height, cfg.width))
}

/// Forward FLOPs with `f` visual tokens and `s` query tokens.
pub fn flops_for_tokens(cfg: &ModelConfig, f: usize, s: usize) -> Result<u64> {
    cfg.validate()?;
    let d = cfg.d;
    let ds = cfg.text_dim();
    let hd = cfg.gru_hidden;
    let n = cfg.queries;
    let ffn = cfg.ffn_mult * d;

    let mut total = mm(f, cfg.cubic()?.patch_len(), d);
    total += encoder_flops(cfg.video_layers, f, d, ffn);
    total += 2 * (mm(s, cfg.word_dim, 3 * hd) + s as u64 * (mm(1, hd, 2 * hd) + mm(1, hd, hd)));
    total += encoder_flops(cfg.text_layers, s, ds, cfg.ffn_mult * ds);
    total += mm(s, ds, cfg.text_ffn_dim) + mm(s, cfg.text_ffn_dim, d);

    let kv = 2 * mm(f, d, d) + 2 * mm(s, d, d);
    let mcma = match cfg.fusion {
        FusionMode::Joint => 2 * mm(n, d, d) + kv + 2 * mm(n, d, f + s),
        FusionMode::Hybrid | FusionMode::HybridValueSplit => {
            3 * mm(n, d, d) + kv + 2 * mm(n, d, f + s)
        }
        FusionMode::Divided | FusionMode::Stepwise | FusionMode::StepwiseLv => {
            mha_flops(n, f, d) + mha_flops(n, s, d)
        }
        FusionMode::Early => mha_flops(n, f + s, d),
        FusionMode::Conditional => mha_flops(n, f, d),
    };
    if cfg.fusion == FusionMode::Conditional {
        total += mm(n, 2 * d, d);
    }
    let layer = mha_flops(n, n, d) + mcma + mm(n, d, ffn) + mm(n, ffn, d);
    total += cfg.decoder_layers as u64 * layer;
    total += 2 * mm(n, d, d) + mm(n, d, 2) + mm(n, d, 1);
    Ok(total)
}

/// Forward FLOPs for the configured clip and a `query_len`-token query.
pub fn estimate_flops(cfg: &ModelConfig, query_len: usize) -> Result<u64> {
    flops_for_tokens(cfg, visual_tokens(cfg)?, query_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_layer_count() {
        assert_eq!(lin(7, 3), 24);
    }

    #[test]
    fn late_fusion_ordering() {
        let d = 320;
        let p = |m| mcma_params(m, d);
        assert!(p(FusionMode::Joint) < p(FusionMode::Hybrid));
        assert!(p(FusionMode::Hybrid) < p(FusionMode::Divided));
        assert!(p(FusionMode::Divided) <= p(FusionMode::Stepwise));
    }
}
