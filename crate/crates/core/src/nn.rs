//! Named parameter storage and the small layer building blocks shared by the
//! encoders, decoder and heads.

use std::collections::HashMap;

use crate::decoder::AttentionBlock;
use crate::error::{GtrError, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Dense `[fan_in × fan_out]` matrix, Xavier-uniform.
    Weight,
    /// Zero-initialized bias.
    Bias,
    /// Layer-norm gain, initialized to one.
    Gain,
    /// Embedding table, normal(0, 0.02).
    Embedding,
    /// Divided-fusion branch weight, initialized to 0.5.
    Mix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<E: Element> {
    pub name: String,
    pub kind: ParamKind,
    pub trainable: bool,
    pub tensor: Tensor<E>,
}

/// Ordered collection of named model parameters. Insertion order is the
/// canonical order used by initialization, the optimizer and checkpoints.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Element> {
    entries: Vec<ParamEntry<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a parameter with its kind's default fill value.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, shape: &[usize]) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let fill = match kind {
            ParamKind::Gain => E::one(),
            ParamKind::Mix => E::of(0.5),
            _ => E::zero(),
        };
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            kind,
            trainable: true,
            tensor: Tensor::full(shape, fill),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        Linear {
            w: self.add(format!("{name}.w"), ParamKind::Weight, &[fan_in, fan_out]),
            b: bias.then(|| self.add(format!("{name}.b"), ParamKind::Bias, &[fan_out])),
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gain: self.add(format!("{name}.gain"), ParamKind::Gain, &[dim]),
            bias: self.add(format!("{name}.bias"), ParamKind::Bias, &[dim]),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<E>] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Overwrite a parameter's values, keeping its shape.
    pub fn assign(&mut self, name: &str, t: Tensor<E>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| GtrError::contract(format!("unknown parameter {name}")))?;
        let cur = self.get(id);
        if cur.shape() != t.shape() {
            return Err(GtrError::dim("assign", cur.shape(), t.shape()));
        }
        *self.get_mut(id) = t;
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    trainable: e.trainable,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// One forward pass: a fresh tape plus lazy binding of store parameters onto it.
pub struct Ctx<'a, E: Element> {
    pub g: Graph<E>,
    store: &'a ParamStore<E>,
    bound: Vec<Option<Var>>,
    /// Collects decoder cross-modal attention maps when `Some`.
    pub attention: Option<Vec<AttentionBlock>>,
}

impl<'a, E: Element> Ctx<'a, E> {
    pub fn new(store: &'a ParamStore<E>) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            attention: None,
        }
    }

    pub fn with_attention_trace(mut self) -> Self {
        self.attention = Some(Vec::new());
        self
    }

    pub fn store(&self) -> &'a ParamStore<E> {
        self.store
    }

    /// Tape handle for a parameter; each parameter is recorded at most once.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = if e.trainable {
            self.g.param(&e.tensor)
        } else {
            self.g.constant(e.tensor.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients after `g.backward`. Parameters that were never
    /// bound (or are frozen) yield `None`.
    pub fn param_grads(&self) -> Vec<Option<Vec<E>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v)))
            .collect()
    }

    pub fn tracing(&self) -> bool {
        self.attention.is_some()
    }
}

/// Dense layer `x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward<E: Element>(&self, cx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let y = cx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = cx.p(b);
                cx.g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn fan_in<E: Element>(&self, store: &ParamStore<E>) -> usize {
        store.get(self.w).shape()[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward<E: Element>(&self, cx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let (gain, bias) = (cx.p(self.gain), cx.p(self.bias));
        cx.g.layer_norm(x, gain, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_with_zero_weights_returns_bias_rows() {
        let mut store = ParamStore::<f64>::new();
        let lin = store.linear("fc", 3, 2, true);
        store
            .get_mut(lin.b.unwrap())
            .data_mut()
            .copy_from_slice(&[0.25, -1.0]);
        let mut cx = Ctx::new(&store);
        let x =
            cx.g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let y = lin.forward(&mut cx, x).unwrap();
        assert_eq!(cx.g.value(y), &[0.25, -1.0, 0.25, -1.0]);
    }

    #[test]
    fn params_bind_once_and_collect_grads() {
        let mut store = ParamStore::<f64>::new();
        let lin = store.linear("fc", 2, 1, false);
        store.get_mut(lin.w).data_mut().copy_from_slice(&[2.0, 3.0]);
        let mut cx = Ctx::new(&store);
        let x = cx.g.constant(Tensor::from_rows(&[&[1.0, 1.0]]));
        let a = lin.forward(&mut cx, x).unwrap();
        let b = lin.forward(&mut cx, x).unwrap();
        let s = cx.g.add(a, b).unwrap();
        let l = cx.g.sum(s);
        cx.g.backward(l).unwrap();
        let grads = cx.param_grads();
        assert_eq!(grads[lin.w.index()].as_deref(), Some(&[2.0, 2.0][..]));
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("table", ParamKind::Embedding, &[2, 2]);
        store.set_trainable(id, false);
        let mut cx = Ctx::new(&store);
        let v = cx.p(id);
        let l = cx.g.sum(v);
        cx.g.backward(l).unwrap();
        assert!(cx.param_grads()[id.index()].is_none());
    }

    #[test]
    fn default_fill_by_kind() {
        let mut store = ParamStore::<f32>::new();
        let g = store.add("g", ParamKind::Gain, &[2]);
        let m = store.add("m", ParamKind::Mix, &[1]);
        assert_eq!(store.get(g).data(), &[1.0, 1.0]);
        assert_eq!(store.get(m).data(), &[0.5]);
        assert_eq!(store.num_scalars(), 3);
        assert!(store.assign("g", Tensor::zeros(&[3])).is_err());
    }
}
