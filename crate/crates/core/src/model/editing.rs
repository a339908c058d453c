//! Editing layers with zero-initialised gated cross-attention, the fusion
//! module and the match head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{attend, KvSource, LayerNorm, Linear, Mlp, Ragged};
use crate::error::{contract, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One editing layer. Each head attends over the image tokens and, scaled by
/// its own gate, over the instruction tokens:
/// `M = [Softmax(S), g·Softmax(S')]`, `out = W_o(M·[V; V'])`.
#[derive(Clone, Debug, PartialEq)]
pub struct EditingLayer {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub k_instr: Linear,
    pub v_instr: Linear,
    pub out: Linear,
    /// `1 × heads`, zero at initialisation.
    pub gate: ParamId,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EditingLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            k_instr: Linear::new(store, &format!("{name}.k_instr"), dim, dim, rng),
            v_instr: Linear::new(store, &format!("{name}.v_instr"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            gate: store.add(format!("{name}.gate"), Tensor::zeros([1, heads])),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        }
    }

    /// Applies the layer. `instr = None` runs the plain self-attention block
    /// (the instruction branch is left out entirely). Sequence `b` of `x` uses
    /// instruction sequence `b`; spans may repeat to share one instruction.
    ///
    /// When `maps` is given, `[A | g·A']` for every `(sequence, head)` is
    /// appended to it.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        heads: usize,
        x: &Ragged,
        instr: Option<&Ragged>,
        maps: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Ragged> {
        let h = self.ln1.forward(tape, store, x.tokens)?;
        let q = self.q.forward(tape, store, h)?;
        let k = self.k.forward(tape, store, h)?;
        let v = self.v.forward(tape, store, h)?;
        let mut sources = Vec::with_capacity(2);
        sources.push(KvSource {
            k,
            v,
            spans: &x.spans,
            gate: None,
        });
        if let Some(t) = instr {
            if t.spans.iter().any(|s| s.1 == 0) {
                return Err(contract("instruction with no tokens"));
            }
            let kp = self.k_instr.forward(tape, store, t.tokens)?;
            let vp = self.v_instr.forward(tape, store, t.tokens)?;
            let g = tape.param(store, self.gate);
            sources.push(KvSource {
                k: kp,
                v: vp,
                spans: &t.spans,
                gate: Some(g),
            });
        }
        let a = attend(tape, heads, q, &x.spans, &sources, maps)?;
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

/// Stack of editing layers followed by a final layer norm on the CLS rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EditingTransformer {
    pub layers: Vec<EditingLayer>,
    pub norm: LayerNorm,
}

impl EditingTransformer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        heads: usize,
        layers: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| EditingLayer::new(store, &format!("edit.{l}"), dim, heads, mlp_ratio, rng))
            .collect();
        let norm = LayerNorm::new(store, "norm", dim);
        Self { layers, norm }
    }

    /// Runs every layer and returns the normalised CLS row of each sequence
    /// (`B × C`).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        heads: usize,
        f0: &Ragged,
        instr: Option<&Ragged>,
    ) -> Result<Var> {
        let mut x = f0.clone();
        for layer in &self.layers {
            x = layer.forward(tape, store, heads, &x, instr, None)?;
        }
        let cls: Vec<usize> = x.spans.iter().map(|s| s.0).collect();
        let f = tape.gather_rows(x.tokens, &cls)?;
        self.norm.forward(tape, store, f)
    }
}

/// Cross-attention block: the image feature is a single query token attending
/// to the instruction tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl FusionBlock {
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

    /// `f` is `B × C`; row `b` attends to instruction sequence `b`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        heads: usize,
        f: Var,
        instr: &Ragged,
    ) -> Result<Var> {
        let b = tape.shape(f).0;
        let q_spans: Vec<(usize, usize)> = (0..b).map(|i| (i, 1)).collect();
        let h = self.ln1.forward(tape, store, f)?;
        let q = self.q.forward(tape, store, h)?;
        let k = self.k.forward(tape, store, instr.tokens)?;
        let v = self.v.forward(tape, store, instr.tokens)?;
        let src = [KvSource {
            k,
            v,
            spans: &instr.spans,
            gate: None,
        }];
        let a = attend(tape, heads, q, &q_spans, &src, None)?;
        let a = self.out.forward(tape, store, a)?;
        let x1 = tape.add(f, a)?;
        let h2 = self.ln2.forward(tape, store, x1)?;
        let m = self.mlp.forward(tape, store, h2)?;
        tape.add(x1, m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub blocks: Vec<FusionBlock>,
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        blocks: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            blocks: (0..blocks)
                .map(|i| FusionBlock::new(store, &format!("fusion.{i}"), dim, mlp_ratio, rng))
                .collect(),
        }
    }

    /// `F_out` for each row of `f` (`B × C`).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        heads: usize,
        f: Var,
        instr: &Ragged,
    ) -> Result<Var> {
        if instr.spans.iter().any(|s| s.1 == 0) || instr.spans.is_empty() {
            return Err(contract("fusion needs at least one instruction token"));
        }
        let mut x = f;
        for blk in &self.blocks {
            x = blk.forward(tape, store, heads, x, instr)?;
        }
        Ok(x)
    }
}
