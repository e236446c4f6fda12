//! Query tokens: vocabulary, word embeddings and the bidirectional GRU.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{GtrError, Result};
use crate::nn::{Ctx, Linear, ParamId, ParamKind, ParamStore};
use crate::tensor::{Element, Tensor, Var};

pub const UNK: &str = "<unk>";

/// Whitespace split + lowercase.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Word list with `<unk>` at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut v = Vocab {
            words: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for w in words {
            v.insert(w.as_ref());
        }
        v
    }

    /// Index of `word`, adding it if new.
    fn insert(&mut self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), self.words.len() - 1);
        self.words.len() - 1
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Word vectors `[vocab × d_w]`; row 0 is the shared unknown row.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    pub matrix: Tensor<f32>,
    pub trainable: bool,
    /// Tokens that appeared more than once in the source file.
    pub duplicates: Vec<String>,
}

impl EmbeddingTable {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Parse a word2vec-style text file, one `token v₁ … v_d` per line. The
/// unknown row is zero. A repeated token keeps its last vector.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    parse_embeddings(&fs::read_to_string(path)?)
}

pub fn parse_embeddings(text: &str) -> Result<EmbeddingTable> {
    let mut vocab = Vocab::new::<&str>(&[]);
    let mut rows: Vec<Vec<f32>> = vec![];
    let mut dim = None;
    let mut duplicates = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|p| p.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| GtrError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        if values.is_empty() {
            return Err(GtrError::Parse {
                line: line_no,
                msg: format!("token {token:?} has no vector"),
            });
        }
        match dim {
            None => {
                dim = Some(values.len());
                rows.push(vec![0.0; values.len()]);
            }
            Some(d) if d != values.len() => {
                return Err(GtrError::Parse {
                    line: line_no,
                    msg: format!("expected {d} values, found {}", values.len()),
                });
            }
            Some(_) => {}
        }
        let before = vocab.len();
        let id = vocab.insert(token);
        if id < before {
            warn!(
                "duplicate embedding token {token:?} on line {line_no}; keeping the later vector"
            );
            duplicates.push(token.to_string());
            rows[id] = values;
        } else {
            rows.push(values);
        }
    }
    let d = dim.ok_or(GtrError::Parse {
        line: 0,
        msg: "embedding file is empty".into(),
    })?;
    let data = rows.into_iter().flatten().collect();
    Ok(EmbeddingTable {
        matrix: Tensor::new(vec![vocab.len(), d], data)?,
        vocab,
        trainable: true,
        duplicates,
    })
}

/// Row gather of `ids` from the embedding parameter `table`.
pub fn embed<E: Element>(cx: &mut Ctx<'_, E>, table: ParamId, ids: &[usize]) -> Result<Var> {
    let t = cx.p(table);
    cx.g.gather_rows(t, ids)
}

/// One GRU direction.
///
/// `z = σ(x W_z + h U_z + b_z)`, `r = σ(x W_r + h U_r + b_r)`,
/// `h̃ = tanh(x W_h + (r⊙h) U_h + b_h)`, `h' = (1−z)⊙h + z⊙h̃`.
/// The input projections for `z, r, h̃` are packed column-wise in `input`
/// (`[d_w × 3H]`), the recurrent `U_z, U_r` in `recur_zr` (`[H × 2H]`).
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub input: Linear,
    pub recur_zr: ParamId,
    pub recur_h: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        GruCell {
            input: store.linear(&format!("{name}.input"), input, 3 * hidden, true),
            recur_zr: store.add(
                format!("{name}.recur_zr"),
                ParamKind::Weight,
                &[hidden, 2 * hidden],
            ),
            recur_h: store.add(
                format!("{name}.recur_h"),
                ParamKind::Weight,
                &[hidden, hidden],
            ),
            hidden,
        }
    }

    /// Run over the rows of `x` in the given order; returns one `[1 × H]`
    /// state per visited row, in visiting order.
    fn run<E: Element>(&self, cx: &mut Ctx<'_, E>, x: Var, order: &[usize]) -> Result<Vec<Var>> {
        let hd = self.hidden;
        let xw = self.input.forward(cx, x)?;
        let (u_zr, u_h) = (cx.p(self.recur_zr), cx.p(self.recur_h));
        let mut h = cx.g.constant(Tensor::zeros(&[1, hd]));
        let mut states = Vec::with_capacity(order.len());
        for &t in order {
            let row = cx.g.slice(xw, 0, t, 1)?;
            let parts = cx.g.split(row, 1, &[hd, hd, hd])?;
            let hzr = cx.g.matmul(h, u_zr)?;
            let hp = cx.g.split(hzr, 1, &[hd, hd])?;
            let z_in = cx.g.add(parts[0], hp[0])?;
            let z = cx.g.sigmoid(z_in);
            let r_in = cx.g.add(parts[1], hp[1])?;
            let r = cx.g.sigmoid(r_in);
            let rh = cx.g.mul(r, h)?;
            let rhu = cx.g.matmul(rh, u_h)?;
            let c_in = cx.g.add(parts[2], rhu)?;
            let cand = cx.g.tanh(c_in);
            // (1 − z)⊙h + z⊙h̃  ==  h + z⊙(h̃ − h)
            let delta = cx.g.sub(cand, h)?;
            let step = cx.g.mul(z, delta)?;
            h = cx.g.add(h, step)?;
            states.push(h);
        }
        Ok(states)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
}

impl BiGru {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        BiGru {
            forward: GruCell::new(store, &format!("{name}.fwd"), input, hidden),
            backward: GruCell::new(store, &format!("{name}.bwd"), input, hidden),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    /// `[S × d_w]` → `[S × 2H]`: row `t` is the forward state after step `t`
    /// next to the backward state after consuming rows `S−1 … t`.
    pub fn forward<E: Element>(&self, cx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let s = cx.g.shape(x)[0];
        if s == 0 {
            return Err(GtrError::contract("bigru needs at least one token"));
        }
        let order: Vec<usize> = (0..s).collect();
        let rev: Vec<usize> = (0..s).rev().collect();
        let fwd = self.forward.run(cx, x, &order)?;
        let mut bwd = self.backward.run(cx, x, &rev)?;
        bwd.reverse();
        let f = cx.g.concat(&fwd, 0)?;
        let b = cx.g.concat(&bwd, 0)?;
        cx.g.concat(&[f, b], 1)
    }
}
