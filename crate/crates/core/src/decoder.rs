//! Cross-modal decoder: learnable segment queries attend to contextualized
//! video tokens `H` and text tokens `S`, then regress `(segment, confidence)`.
//!
//! Every layer runs query self-attention, one multi-head cross-modal
//! attention (MCMA) block and a feed-forward block, each followed by a
//! residual connection and layer norm. The MCMA variant is picked by
//! [`FusionMode`]:
//!
//! | mode                 | memory handling                                            |
//! |----------------------|------------------------------------------------------------|
//! | `joint`              | one softmax over the stacked `F+S` modality keys            |
//! | `divided`            | two independent attentions, mixed by two learnable scalars |
//! | `hybrid`             | per-modality softmax, values applied as one stacked block  |
//! | `hybrid_value_split` | joint softmax, weights split and applied per modality      |
//! | `stepwise`           | video attention, then language attention on its output     |
//! | `stepwise_lv`        | language first, then video                                 |
//! | `early`              | `H` and `S` concatenated into one memory before decoding   |
//! | `conditional`        | pooled `S` conditions the queries; layers attend `H` only   |
//!
//! Keys and values of the two modalities are stacked along the token axis.

use std::fmt;
use std::str::FromStr;

use crate::error::{GtrError, Result};
use crate::matching::Segment;
use crate::nn::{Ctx, LayerNorm, Linear, ParamId, ParamKind, ParamStore};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::transformer::{attend, check_heads, mha, mha_with_weights, FeedForward, MhaParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Joint,
    Divided,
    Hybrid,
    HybridValueSplit,
    Stepwise,
    StepwiseLv,
    Early,
    Conditional,
}

impl FusionMode {
    pub const ALL: [FusionMode; 8] = [
        FusionMode::Joint,
        FusionMode::Divided,
        FusionMode::Hybrid,
        FusionMode::HybridValueSplit,
        FusionMode::Stepwise,
        FusionMode::StepwiseLv,
        FusionMode::Early,
        FusionMode::Conditional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Joint => "joint",
            FusionMode::Divided => "divided",
            FusionMode::Hybrid => "hybrid",
            FusionMode::HybridValueSplit => "hybrid_value_split",
            FusionMode::Stepwise => "stepwise",
            FusionMode::StepwiseLv => "stepwise_lv",
            FusionMode::Early => "early",
            FusionMode::Conditional => "conditional",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = GtrError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_lowercase().replace('-', "_");
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| GtrError::Config(format!("unknown fusion mode {s:?}")))
    }
}

/// Head counts per decoder layer.
pub mod schedule {
    use crate::error::{GtrError, Result};

    pub const COLUMNAR: [usize; 6] = [4, 4, 4, 4, 4, 4];
    pub const SHRINK: [usize; 6] = [8, 8, 4, 4, 2, 1];
    pub const EXPAND: [usize; 6] = [1, 2, 4, 4, 8, 8];

    /// Parse `columnar[:n]`, `shrink`, `expand` or an explicit comma list.
    /// The named shrink/expand schedules are defined for six layers.
    pub fn parse(spec: &str, layers: usize) -> Result<Vec<usize>> {
        let spec = spec.trim();
        let named = |table: &[usize; 6]| {
            if layers == 6 {
                Ok(table.to_vec())
            } else {
                Err(GtrError::Config(format!(
                    "head schedule {spec:?} is defined for 6 decoder layers, not {layers}"
                )))
            }
        };
        let out = match spec {
            "shrink" => named(&SHRINK)?,
            "expand" => named(&EXPAND)?,
            "columnar" => vec![COLUMNAR[0]; layers],
            _ if spec.starts_with("columnar:") => {
                let n = spec["columnar:".len()..]
                    .parse()
                    .map_err(|_| GtrError::Config(format!("bad head count in {spec:?}")))?;
                vec![n; layers]
            }
            _ => spec
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| GtrError::Config(format!("bad head schedule {spec:?}")))?,
        };
        if out.len() != layers {
            return Err(GtrError::Config(format!(
                "head schedule has {} entries for {layers} decoder layers",
                out.len()
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// One head count per decoder layer.
    pub heads: Vec<usize>,
}

impl FusionConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.heads.is_empty() {
            return Err(GtrError::Config("decoder needs at least one layer".into()));
        }
        self.heads.iter().try_for_each(|&h| check_heads(d, h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Video,
    Language,
}

impl Modality {
    pub fn tag(self) -> char {
        match self {
            Modality::Video => 'V',
            Modality::Language => 'L',
        }
    }
}

/// One softmax block of cross-modal attention, averaged over heads.
/// `weights` is `[N × Σ len]`; columns follow `segments` in order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub layer: usize,
    pub segments: Vec<(Modality, usize)>,
    pub weights: Tensor<f64>,
}

impl AttentionBlock {
    /// `(query, token, modality, weight)` rows; token indices restart at 0
    /// within each modality.
    pub fn rows(&self) -> Vec<(usize, usize, Modality, f64)> {
        let mut out = Vec::with_capacity(self.weights.numel());
        for q in 0..self.weights.rows() {
            let mut col = 0;
            for &(m, len) in &self.segments {
                for t in 0..len {
                    out.push((q, t, m, self.weights.at(q, col)));
                    col += 1;
                }
            }
        }
        out
    }
}

/// Render blocks as CSV with header `query,token,modality,weight`.
pub fn attention_csv(blocks: &[AttentionBlock]) -> String {
    let mut s = String::from("query,token,modality,weight\n");
    for b in blocks {
        for (q, t, m, w) in b.rows() {
            s.push_str(&format!("{q},{t},{},{w}\n", m.tag()));
        }
    }
    s
}

fn record<E: Element>(
    cx: &mut Ctx<'_, E>,
    layer: usize,
    head_weights: &[Var],
    segments: Vec<(Modality, usize)>,
) {
    let Some(trace) = cx.attention.as_mut() else {
        return;
    };
    let shape = cx.g.shape(head_weights[0]).to_vec();
    let mut acc = vec![0.0; shape.iter().product()];
    for &w in head_weights {
        acc.iter_mut()
            .zip(cx.g.value(w))
            .for_each(|(a, v)| *a += v.f64());
    }
    let n = head_weights.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    trace.push(AttentionBlock {
        layer,
        segments,
        weights: Tensor::new(shape, acc).unwrap(),
    });
}

/// Modality-specific key/value projections `W_h^k, W_s^k, W_h^v, W_s^v`.
#[derive(Debug, Clone, Copy)]
pub struct ModalKv {
    pub hk: Linear,
    pub sk: Linear,
    pub hv: Linear,
    pub sv: Linear,
}

impl ModalKv {
    fn new<E: Element>(store: &mut ParamStore<E>, name: &str, d: usize) -> Self {
        ModalKv {
            hk: store.linear(&format!("{name}.hk"), d, d, true),
            sk: store.linear(&format!("{name}.sk"), d, d, true),
            hv: store.linear(&format!("{name}.hv"), d, d, true),
            sv: store.linear(&format!("{name}.sv"), d, d, true),
        }
    }

    fn project<E: Element>(&self, cx: &mut Ctx<'_, E>, h: Var, s: Var) -> Result<[Var; 4]> {
        Ok([
            self.hk.forward(cx, h)?,
            self.sk.forward(cx, s)?,
            self.hv.forward(cx, h)?,
            self.sv.forward(cx, s)?,
        ])
    }
}

/// Parameters of one MCMA block.
#[derive(Debug, Clone, Copy)]
pub enum Mcma {
    Joint {
        q: Linear,
        kv: ModalKv,
        o: Linear,
    },
    Divided {
        video: MhaParams,
        language: MhaParams,
        mix: [ParamId; 2],
    },
    /// Separate query projections per modality feed two softmaxes.
    Hybrid {
        qh: Linear,
        qs: Linear,
        kv: ModalKv,
        o: Linear,
    },
    HybridValueSplit {
        qh: Linear,
        qs: Linear,
        kv: ModalKv,
        o: Linear,
    },
    /// Two cascaded attentions joined by a residual + layer norm.
    Stepwise {
        first: MhaParams,
        mid_norm: LayerNorm,
        second: MhaParams,
        language_first: bool,
    },
    /// Plain cross-attention over a single memory (early / conditional).
    Single {
        attn: MhaParams,
    },
}

impl Mcma {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        mode: FusionMode,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        let lin =
            |store: &mut ParamStore<E>, n: &str| store.linear(&format!("{name}.{n}"), d, d, true);
        Ok(match mode {
            FusionMode::Joint => Mcma::Joint {
                q: lin(store, "q"),
                kv: ModalKv::new(store, name, d),
                o: lin(store, "o"),
            },
            FusionMode::Divided => Mcma::Divided {
                video: MhaParams::new(store, &format!("{name}.video"), d, heads)?,
                language: MhaParams::new(store, &format!("{name}.language"), d, heads)?,
                mix: [
                    store.add(format!("{name}.mix_video"), ParamKind::Mix, &[1]),
                    store.add(format!("{name}.mix_language"), ParamKind::Mix, &[1]),
                ],
            },
            FusionMode::Hybrid | FusionMode::HybridValueSplit => {
                let qh = lin(store, "qh");
                let qs = lin(store, "qs");
                let kv = ModalKv::new(store, name, d);
                let o = lin(store, "o");
                if mode == FusionMode::Hybrid {
                    Mcma::Hybrid { qh, qs, kv, o }
                } else {
                    Mcma::HybridValueSplit { qh, qs, kv, o }
                }
            }
            FusionMode::Stepwise | FusionMode::StepwiseLv => Mcma::Stepwise {
                first: MhaParams::new(store, &format!("{name}.first"), d, heads)?,
                mid_norm: store.layer_norm(&format!("{name}.mid_norm"), d),
                second: MhaParams::new(store, &format!("{name}.second"), d, heads)?,
                language_first: mode == FusionMode::StepwiseLv,
            },
            FusionMode::Early | FusionMode::Conditional => Mcma::Single {
                attn: MhaParams::new(store, &format!("{name}.attn"), d, heads)?,
            },
        })
    }

    /// `memory` is the single memory for `Single`; otherwise `h` and `s`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<E: Element>(
        &self,
        cx: &mut Ctx<'_, E>,
        q_hat: Var,
        h: Var,
        s: Var,
        memory: Option<(Var, Vec<(Modality, usize)>)>,
        heads: usize,
        layer: usize,
    ) -> Result<Var> {
        match self {
            Mcma::Joint { q, kv, o } => fuse_joint(cx, q_hat, h, s, *q, kv, *o, heads, layer),
            Mcma::Divided {
                video,
                language,
                mix,
            } => fuse_divided(cx, q_hat, h, s, video, language, *mix, layer),
            Mcma::Hybrid { qh, qs, kv, o } => {
                fuse_hybrid(cx, q_hat, h, s, [*qh, *qs], kv, *o, heads, layer)
            }
            Mcma::HybridValueSplit { qh, qs, kv, o } => {
                fuse_hybrid_value_split(cx, q_hat, h, s, [*qh, *qs], kv, *o, heads, layer)
            }
            Mcma::Stepwise {
                first,
                mid_norm,
                second,
                language_first,
            } => fuse_stepwise(
                cx,
                q_hat,
                h,
                s,
                first,
                mid_norm,
                second,
                *language_first,
                layer,
            ),
            Mcma::Single { attn } => {
                let (mem, segments) = memory
                    .ok_or_else(|| GtrError::contract("single-memory fusion without memory"))?;
                let (y, w) = mha_with_weights(cx, q_hat, mem, mem, attn)?;
                record(cx, layer, &w, segments);
                Ok(y)
            }
        }
    }
}

fn rows<E: Element>(g: &Graph<E>, v: Var) -> usize {
    g.shape(v)[0]
}

fn check_width<E: Element>(g: &Graph<E>, vars: &[Var]) -> Result<usize> {
    let d = g.shape(vars[0])[1];
    for &v in vars {
        if g.shape(v).len() != 2 || g.shape(v)[1] != d {
            return Err(GtrError::dim("mcma", g.shape(vars[0]), g.shape(v)));
        }
    }
    Ok(d)
}

/// `MHA(Q̂, H^k ⊗ S^k, H^v ⊗ S^v)` with token-axis stacking.
#[allow(clippy::too_many_arguments)]
pub fn fuse_joint<E: Element>(
    cx: &mut Ctx<'_, E>,
    q_hat: Var,
    h: Var,
    s: Var,
    q: Linear,
    kv: &ModalKv,
    o: Linear,
    heads: usize,
    layer: usize,
) -> Result<Var> {
    check_width(&cx.g, &[q_hat, h, s])?;
    let qp = q.forward(cx, q_hat)?;
    let [hk, sk, hv, sv] = kv.project(cx, h, s)?;
    let k = cx.g.concat(&[hk, sk], 0)?;
    let v = cx.g.concat(&[hv, sv], 0)?;
    let (out, w) = attend(&mut cx.g, qp, k, v, heads)?;
    let segments = vec![
        (Modality::Video, rows(&cx.g, h)),
        (Modality::Language, rows(&cx.g, s)),
    ];
    record(cx, layer, &w, segments);
    o.forward(cx, out)
}

/// `w_v·MHA(Q̂, H, H) + w_l·MHA(Q̂, S, S)` with learnable scalars `w_v, w_l`.
#[allow(clippy::too_many_arguments)]
pub fn fuse_divided<E: Element>(
    cx: &mut Ctx<'_, E>,
    q_hat: Var,
    h: Var,
    s: Var,
    video: &MhaParams,
    language: &MhaParams,
    mix: [ParamId; 2],
    layer: usize,
) -> Result<Var> {
    check_width(&cx.g, &[q_hat, h, s])?;
    let (yv, wv) = mha_with_weights(cx, q_hat, h, h, video)?;
    record(cx, layer, &wv, vec![(Modality::Video, rows(&cx.g, h))]);
    let (yl, wl) = mha_with_weights(cx, q_hat, s, s, language)?;
    record(cx, layer, &wl, vec![(Modality::Language, rows(&cx.g, s))]);
    let (mv, ml) = (cx.p(mix[0]), cx.p(mix[1]));
    let a = cx.g.mul_scalar(yv, mv)?;
    let b = cx.g.mul_scalar(yl, ml)?;
    cx.g.add(a, b)
}

/// Per head `[σ(Q̂ᵢ H_iᵏᵀ/√d_h) ⊗ σ(Q̂ᵢ S_iᵏᵀ/√d_h)]·[H_iᵛ ⊗ S_iᵛ]`: two
/// separately normalized weight blocks side by side, applied to the stacked
/// values in one product.
#[allow(clippy::too_many_arguments)]
pub fn fuse_hybrid<E: Element>(
    cx: &mut Ctx<'_, E>,
    q_hat: Var,
    h: Var,
    s: Var,
    q: [Linear; 2],
    kv: &ModalKv,
    o: Linear,
    heads: usize,
    layer: usize,
) -> Result<Var> {
    let d = check_width(&cx.g, &[q_hat, h, s])?;
    check_heads(d, heads)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qh = q[0].forward(cx, q_hat)?;
    let qs = q[1].forward(cx, q_hat)?;
    let [hk, sk, hv, sv] = kv.project(cx, h, s)?;
    let (mut outs, mut wv, mut wl) = (vec![], vec![], vec![]);
    for i in 0..heads {
        let g = &mut cx.g;
        let col = |g: &mut Graph<E>, x: Var| g.slice(x, 1, i * dh, dh);
        let (qhi, qsi) = (col(g, qh)?, col(g, qs)?);
        let (hki, ski, hvi, svi) = (col(g, hk)?, col(g, sk)?, col(g, hv)?, col(g, sv)?);
        let lv = g.matmul_t(qhi, hki)?;
        let lv = g.scale(lv, scale);
        let av = g.softmax(lv, 1)?;
        let ll = g.matmul_t(qsi, ski)?;
        let ll = g.scale(ll, scale);
        let al = g.softmax(ll, 1)?;
        let w = g.concat(&[av, al], 1)?;
        let v = g.concat(&[hvi, svi], 0)?;
        outs.push(g.matmul(w, v)?);
        wv.push(av);
        wl.push(al);
    }
    let out = cx.g.concat(&outs, 1)?;
    record(cx, layer, &wv, vec![(Modality::Video, rows(&cx.g, h))]);
    record(cx, layer, &wl, vec![(Modality::Language, rows(&cx.g, s))]);
    o.forward(cx, out)
}

/// One softmax over the stacked logits of both modalities; the weights are
/// split back into `[N × F]` and `[N × S]` and applied to `H^v` and `S^v`
/// separately, then summed.
#[allow(clippy::too_many_arguments)]
pub fn fuse_hybrid_value_split<E: Element>(
    cx: &mut Ctx<'_, E>,
    q_hat: Var,
    h: Var,
    s: Var,
    q: [Linear; 2],
    kv: &ModalKv,
    o: Linear,
    heads: usize,
    layer: usize,
) -> Result<Var> {
    let d = check_width(&cx.g, &[q_hat, h, s])?;
    check_heads(d, heads)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (f, n_s) = (rows(&cx.g, h), rows(&cx.g, s));
    let qh = q[0].forward(cx, q_hat)?;
    let qs = q[1].forward(cx, q_hat)?;
    let [hk, sk, hv, sv] = kv.project(cx, h, s)?;
    let (mut outs, mut ws) = (vec![], vec![]);
    for i in 0..heads {
        let g = &mut cx.g;
        let col = |g: &mut Graph<E>, x: Var| g.slice(x, 1, i * dh, dh);
        let (qhi, qsi) = (col(g, qh)?, col(g, qs)?);
        let (hki, ski, hvi, svi) = (col(g, hk)?, col(g, sk)?, col(g, hv)?, col(g, sv)?);
        let lv = g.matmul_t(qhi, hki)?;
        let ll = g.matmul_t(qsi, ski)?;
        let logits = g.concat(&[lv, ll], 1)?;
        let logits = g.scale(logits, scale);
        let a = g.softmax(logits, 1)?;
        let parts = g.split(a, 1, &[f, n_s])?;
        let yv = g.matmul(parts[0], hvi)?;
        let yl = g.matmul(parts[1], svi)?;
        outs.push(g.add(yv, yl)?);
        ws.push(a);
    }
    let out = cx.g.concat(&outs, 1)?;
    record(
        cx,
        layer,
        &ws,
        vec![(Modality::Video, f), (Modality::Language, n_s)],
    );
    o.forward(cx, out)
}

/// Two cross-attention steps, `(M₁, M₂) = (H, S)` or `(S, H)` when
/// `language_first`: `mid = LN(Q̂ + MHA(Q̂, M₁, M₁))`, then
/// `MHA(mid, M₂, M₂)`. The first step keeps its residual, so the returned
/// increment is `mid − Q̂ + MHA(mid, M₂, M₂)` and the layer's own residual
/// yields `mid + MHA(mid, M₂, M₂)`.
#[allow(clippy::too_many_arguments)]
pub fn fuse_stepwise<E: Element>(
    cx: &mut Ctx<'_, E>,
    q_hat: Var,
    h: Var,
    s: Var,
    first: &MhaParams,
    mid_norm: &LayerNorm,
    second: &MhaParams,
    language_first: bool,
    layer: usize,
) -> Result<Var> {
    check_width(&cx.g, &[q_hat, h, s])?;
    let (m1, m2, t1, t2) = if language_first {
        (s, h, Modality::Language, Modality::Video)
    } else {
        (h, s, Modality::Video, Modality::Language)
    };
    let (inner, w1) = mha_with_weights(cx, q_hat, m1, m1, first)?;
    record(cx, layer, &w1, vec![(t1, rows(&cx.g, m1))]);
    let r = cx.g.add(q_hat, inner)?;
    let mid = mid_norm.forward(cx, r)?;
    let (out, w2) = mha_with_weights(cx, mid, m2, m2, second)?;
    record(cx, layer, &w2, vec![(t2, rows(&cx.g, m2))]);
    let step = cx.g.sub(mid, q_hat)?;
    cx.g.add(step, out)
}

/// Early fusion memory: `H` rows followed by `S` rows.
pub fn fuse_early<E: Element>(g: &mut Graph<E>, h: Var, s: Var) -> Result<Var> {
    check_width(g, &[h, s])?;
    g.concat(&[h, s], 0)
}

/// Conditional fusion: every query row is concatenated with the token mean
/// of `S` and projected from `2d` back to `d`.
pub fn fuse_conditional<E: Element>(
    cx: &mut Ctx<'_, E>,
    queries: Var,
    s: Var,
    proj: &Linear,
) -> Result<Var> {
    check_width(&cx.g, &[queries, s])?;
    let pooled = cx.g.mean_rows(s)?;
    let n = rows(&cx.g, queries);
    let tiled = cx.g.concat(&vec![pooled; n], 0)?;
    let cat = cx.g.concat(&[queries, tiled], 1)?;
    proj.forward(cx, cat)
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_attn: MhaParams,
    pub norm1: LayerNorm,
    pub mcma: Mcma,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub mode: FusionMode,
    pub layers: Vec<DecoderLayer>,
    /// `[2d × d]` query conditioning, only for conditional fusion.
    pub condition: Option<Linear>,
    pub dim: usize,
}

impl Decoder {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        cfg: &FusionConfig,
        d: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        cfg.validate(d)?;
        let condition = (cfg.mode == FusionMode::Conditional)
            .then(|| store.linear("decoder.condition", 2 * d, d, true));
        let layers = cfg
            .heads
            .iter()
            .enumerate()
            .map(|(i, &heads)| {
                let n = format!("decoder.{i}");
                Ok(DecoderLayer {
                    self_attn: MhaParams::new(store, &format!("{n}.self_attn"), d, heads)?,
                    norm1: store.layer_norm(&format!("{n}.norm1"), d),
                    mcma: Mcma::new(store, &format!("{n}.mcma"), cfg.mode, d, heads)?,
                    norm2: store.layer_norm(&format!("{n}.norm2"), d),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, ffn_dim, d),
                    norm3: store.layer_norm(&format!("{n}.norm3"), d),
                    heads,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            mode: cfg.mode,
            layers,
            condition,
            dim: d,
        })
    }

    /// `queries: [N × d]`, `h: [F × d]`, `s: [S × d]` → decoded `[N × d]`.
    pub fn decode<E: Element>(
        &self,
        cx: &mut Ctx<'_, E>,
        queries: Var,
        h: Var,
        s: Var,
    ) -> Result<Var> {
        check_width(&cx.g, &[queries, h, s])?;
        if cx.g.shape(queries)[1] != self.dim {
            return Err(GtrError::dim("decode", cx.g.shape(queries), &[self.dim]));
        }
        let (f, n_s) = (rows(&cx.g, h), rows(&cx.g, s));
        let mut q = queries;
        let memory = match self.mode {
            FusionMode::Early => Some((
                fuse_early(&mut cx.g, h, s)?,
                vec![(Modality::Video, f), (Modality::Language, n_s)],
            )),
            FusionMode::Conditional => {
                let proj = self
                    .condition
                    .as_ref()
                    .expect("conditional decoder has a projection");
                q = fuse_conditional(cx, q, s, proj)?;
                Some((h, vec![(Modality::Video, f)]))
            }
            _ => None,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let sa = mha(cx, q, q, q, &layer.self_attn)?;
            let r = cx.g.add(q, sa)?;
            let q_hat = layer.norm1.forward(cx, r)?;
            let y = layer
                .mcma
                .forward(cx, q_hat, h, s, memory.clone(), layer.heads, i)?;
            let r = cx.g.add(q_hat, y)?;
            q = layer.norm2.forward(cx, r)?;
            let f = layer.ffn.forward(cx, q)?;
            let r = cx.g.add(q, f)?;
            q = layer.norm3.forward(cx, r)?;
        }
        Ok(q)
    }
}

/// Box MLP (`d→d→d→2`, sigmoid) and confidence head (`d→1`, sigmoid).
#[derive(Debug, Clone, Copy)]
pub struct PredictionHeads {
    pub box_mlp: [Linear; 3],
    pub confidence: Linear,
}

/// Head outputs on the tape: `boxes: [N × 2]` as (center, width), `confidence: [N × 1]`.
#[derive(Debug, Clone, Copy)]
pub struct PredictionVars {
    pub boxes: Var,
    pub confidence: Var,
}

impl PredictionHeads {
    pub fn new<E: Element>(store: &mut ParamStore<E>, d: usize) -> Self {
        PredictionHeads {
            box_mlp: [
                store.linear("head.box.0", d, d, true),
                store.linear("head.box.1", d, d, true),
                store.linear("head.box.2", d, 2, true),
            ],
            confidence: store.linear("head.conf", d, 1, true),
        }
    }

    pub fn forward<E: Element>(&self, cx: &mut Ctx<'_, E>, x: Var) -> Result<PredictionVars> {
        let mut b = x;
        for (i, lin) in self.box_mlp.iter().enumerate() {
            b = lin.forward(cx, b)?;
            if i < 2 {
                b = cx.g.relu(b);
            }
        }
        let boxes = cx.g.sigmoid(b);
        let c = self.confidence.forward(cx, x)?;
        let confidence = cx.g.sigmoid(c);
        Ok(PredictionVars { boxes, confidence })
    }
}

/// Detached predictions for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// `(center, width)` per query, both in `(0, 1)`.
    pub boxes: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

impl PredictionSet {
    pub fn from_vars<E: Element>(g: &Graph<E>, vars: &PredictionVars) -> Self {
        let b = g.value(vars.boxes);
        PredictionSet {
            boxes: b.chunks(2).map(|c| [c[0].f64(), c[1].f64()]).collect(),
            confidence: g.value(vars.confidence).iter().map(|v| v.f64()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.confidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidence.is_empty()
    }

    /// `(start, end) = (c − w/2, c + w/2)`, clipped to `[0, 1]`.
    pub fn segment(&self, i: usize) -> Segment {
        Segment::from_center_width(self.boxes[i][0], self.boxes[i][1])
    }

    pub fn segments(&self) -> Vec<Segment> {
        (0..self.len()).map(|i| self.segment(i)).collect()
    }
}
