//! Parameterised building blocks shared by the encoders, the editing layers
//! and the fusion module.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Result};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Several token sequences stacked row-wise into one `Σlen × C` node.
#[derive(Clone, Debug, PartialEq)]
pub struct Ragged {
    pub tokens: Var,
    /// `(first_row, len)` of each sequence.
    pub spans: Vec<(usize, usize)>,
}

impl Ragged {
    pub fn uniform(tokens: Var, batch: usize, len: usize) -> Self {
        Self {
            tokens,
            spans: (0..batch).map(|b| (b * len, len)).collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.spans.len()
    }

    /// Stacks per-sequence nodes.
    pub fn stack<T: Scalar>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Self> {
        let mut spans = Vec::with_capacity(parts.len());
        let mut off = 0;
        for &p in parts {
            let len = tape.shape(p).0;
            spans.push((off, len));
            off += len;
        }
        let tokens = tape.concat_rows(parts)?;
        Ok(Self { tokens, spans })
    }

    pub fn sequence<T: Scalar>(&self, tape: &mut Tape<T>, b: usize) -> Result<Var> {
        let (s, l) = self.spans[b];
        tape.rows(self.tokens, s, l)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / libm::sqrt(fan_in as f64);
        let w = store.add(format!("{name}.w"), trunc_normal(fan_in, fan_out, std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros([1, fan_out]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([1, dim], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([1, dim]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Keys and values one query set attends over, optionally scaled per head by
/// `gate[h]` after the softmax.
pub(crate) struct KvSource<'a> {
    pub k: Var,
    pub v: Var,
    pub spans: &'a [(usize, usize)],
    pub gate: Option<Var>,
}

/// Multi-head attention. Sequence `b` of the queries attends over sequence `b`
/// of every source; each source gets its own softmax and the weighted values
/// are summed. With one gated second source this is `[Softmax(S), g·Softmax(S')]`
/// applied to `[V; V']`.
///
/// When `maps` is given, the concatenated attention map of every
/// `(sequence, head)` is pushed onto it.
pub(crate) fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    heads: usize,
    q: Var,
    q_spans: &[(usize, usize)],
    sources: &[KvSource<'_>],
    mut maps: Option<&mut Vec<Tensor<T>>>,
) -> Result<Var> {
    let dim = tape.shape(q).1;
    let hd = dim / heads;
    let scale = T::from_f64(1.0 / libm::sqrt(hd as f64));
    for s in sources {
        if s.spans.len() != q_spans.len() {
            return Err(contract(format!(
                "attention over {} key sequences for {} query sequences",
                s.spans.len(),
                q_spans.len()
            )));
        }
        if let Some(&(_, 0)) = s.spans.iter().find(|sp| sp.1 == 0) {
            return Err(contract("attention over an empty key sequence"));
        }
    }
    let mut per_seq = Vec::with_capacity(q_spans.len());
    for (b, &(qs, ql)) in q_spans.iter().enumerate() {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, qs, ql, h * hd, hd)?;
            let mut out: Option<Var> = None;
            let mut map_parts = Vec::new();
            for s in sources {
                let (ks, kl) = s.spans[b];
                let kh = tape.slice(s.k, ks, kl, h * hd, hd)?;
                let vh = tape.slice(s.v, ks, kl, h * hd, hd)?;
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale);
                let mut attn = tape.softmax(scores);
                if let Some(g) = s.gate {
                    attn = tape.scale_by(attn, g, h)?;
                }
                if maps.is_some() {
                    map_parts.push(attn);
                }
                let o = tape.matmul(attn, vh)?;
                out = Some(match out {
                    None => o,
                    Some(prev) => tape.add(prev, o)?,
                });
            }
            if let Some(m) = maps.as_deref_mut() {
                let cat = tape.concat_cols(&map_parts)?;
                m.push(tape.value(cat).clone());
            }
            per_head.push(out.ok_or_else(|| contract("attention without key sources"))?);
        }
        per_seq.push(tape.concat_cols(&per_head)?);
    }
    tape.concat_rows(&per_seq)
}

/// Pre-norm self-attention transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        heads: usize,
        x: &Ragged,
    ) -> Result<Ragged> {
        let h = self.ln1.forward(tape, store, x.tokens)?;
        let q = self.q.forward(tape, store, h)?;
        let k = self.k.forward(tape, store, h)?;
        let v = self.v.forward(tape, store, h)?;
        let src = [KvSource {
            k,
            v,
            spans: &x.spans,
            gate: None,
        }];
        let a = attend(tape, heads, q, &x.spans, &src, None)?;
        let a = self.out.forward(tape, store, a)?;
        let x1 = tape.add(x.tokens, a)?;
        let h2 = self.ln2.forward(tape, store, x1)?;
        let m = self.mlp.forward(tape, store, h2)?;
        let x2 = tape.add(x1, m)?;
        Ok(Ragged {
            tokens: x2,
            spans: x.spans.clone(),
        })
    }
}
