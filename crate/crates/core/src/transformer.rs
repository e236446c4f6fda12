//! Multi-head attention, post-norm encoder layers and the text width adapter.

use crate::error::{GtrError, Result};
use crate::nn::{Ctx, LayerNorm, Linear, ParamStore};
use crate::tensor::{Element, Graph, Var};

/// Projections of one multi-head attention block. All `[d × d]`.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(GtrError::Config(format!(
            "{heads} heads do not divide width {d}"
        )));
    }
    Ok(())
}

impl MhaParams {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(MhaParams {
            q: store.linear(&format!("{name}.q"), d, d, true),
            k: store.linear(&format!("{name}.k"), d, d, true),
            v: store.linear(&format!("{name}.v"), d, d, true),
            o: store.linear(&format!("{name}.o"), d, d, true),
            heads,
        })
    }
}

/// Scaled dot-product attention on already projected inputs.
///
/// Returns the heads concatenated along channels (`[L_q × d]`, before any
/// output projection) and the per-head weight matrices (`[L_q × L_k]`).
pub fn attend<E: Element>(
    g: &mut Graph<E>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(q)[1];
    if g.shape(k)[1] != d || g.shape(v)[1] != d {
        return Err(GtrError::dim("attention", g.shape(q), g.shape(k)));
    }
    if g.shape(k)[0] != g.shape(v)[0] {
        return Err(GtrError::dim("attention", g.shape(k), g.shape(v)));
    }
    check_heads(d, heads)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 1, h * dh, dh)?,
                g.slice(k, 1, h * dh, dh)?,
                g.slice(v, 1, h * dh, dh)?,
            )
        };
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax(scores, 1)?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    Ok((out, weights))
}

/// Standard multi-head attention: project, attend per head, concatenate, project.
pub fn mha<E: Element>(cx: &mut Ctx<'_, E>, q: Var, k: Var, v: Var, p: &MhaParams) -> Result<Var> {
    Ok(mha_with_weights(cx, q, k, v, p)?.0)
}

pub fn mha_with_weights<E: Element>(
    cx: &mut Ctx<'_, E>,
    q: Var,
    k: Var,
    v: Var,
    p: &MhaParams,
) -> Result<(Var, Vec<Var>)> {
    let d = cx.store().get(p.q.w).shape()[0];
    for x in [q, k, v] {
        if cx.g.shape(x).len() != 2 || cx.g.shape(x)[1] != d {
            return Err(GtrError::dim("mha", cx.g.shape(x), &[d]));
        }
    }
    let qp = p.q.forward(cx, q)?;
    let kp = p.k.forward(cx, k)?;
    let vp = p.v.forward(cx, v)?;
    let (heads, w) = attend(&mut cx.g, qp, kp, vp, p.heads)?;
    Ok((p.o.forward(cx, heads)?, w))
}

/// Two-layer feed-forward block `relu(x W₁ + b₁) W₂ + b₂`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        FeedForward {
            fc1: store.linear(&format!("{name}.fc1"), d_in, hidden, true),
            fc2: store.linear(&format!("{name}.fc2"), hidden, d_out, true),
        }
    }

    pub fn forward<E: Element>(&self, cx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.g.relu(h);
        self.fc2.forward(cx, h)
    }
}

/// Post-norm encoder layer: `x ← LN(x + MHA(x,x,x))`, `x ← LN(x + FFN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub attn: MhaParams,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub dim: usize,
}

impl EncoderStack {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        layers: usize,
        d: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(GtrError::Config(format!(
                "{name}: encoder needs at least one layer"
            )));
        }
        let layers = (0..layers)
            .map(|i| {
                let n = format!("{name}.{i}");
                Ok(EncoderLayer {
                    attn: MhaParams::new(store, &format!("{n}.attn"), d, heads)?,
                    norm1: store.layer_norm(&format!("{n}.norm1"), d),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, ffn_dim, d),
                    norm2: store.layer_norm(&format!("{n}.norm2"), d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderStack { layers, dim: d })
    }

    pub fn encode<E: Element>(&self, cx: &mut Ctx<'_, E>, tokens: Var) -> Result<Var> {
        let sh = cx.g.shape(tokens);
        if sh.len() != 2 || sh[1] != self.dim {
            return Err(GtrError::dim("encode", sh, &[self.dim]));
        }
        let mut x = tokens;
        for layer in &self.layers {
            let a = mha(cx, x, x, x, &layer.attn)?;
            let r = cx.g.add(x, a)?;
            x = layer.norm1.forward(cx, r)?;
            let f = layer.ffn.forward(cx, x)?;
            let r = cx.g.add(x, f)?;
            x = layer.norm2.forward(cx, r)?;
        }
        Ok(x)
    }
}

/// Width adapter for contextualized text tokens: `[S × d_s]` → `[S × d]`.
pub type TextProjection = FeedForward;

pub fn project_text<E: Element>(cx: &mut Ctx<'_, E>, s: Var, proj: &TextProjection) -> Result<Var> {
    proj.forward(cx, s)
}
