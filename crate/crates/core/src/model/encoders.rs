//! Query-image patch embedding and the instruction encoder.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{Block, LayerNorm, Linear, Ragged};
use super::tokenizer::token_ids;
use crate::error::{contract, shape_err, Result};
use crate::params::{trunc_normal, ParamId, ParamStore, INIT_STD};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Positional embeddings start large enough that patches are told apart
/// before any training: a from-scratch encoder with near-zero positions
/// pools every cell the same way.
const POS_INIT_STD: f64 = 0.5;

/// Splits a `channels × H × W` image into non-overlapping `p × p` patches.
///
/// Returns `N × (channels·p·p)`; patches are ordered row-major over the patch
/// grid and each row is flattened channel-major, then by pixel row.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(shape_err("patchify", s, &[patch]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let d = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let y = gy * patch + dy;
                    let base = ch * h * w + y * w + gx * patch;
                    out.extend_from_slice(&d[base..base + patch]);
                }
            }
        }
    }
    Ok(Tensor::matrix(gh * gw, c * patch * patch, out))
}

/// Maps pixel values in `[0, 1]` to `[-1, 1]`.
pub fn normalize_pixels<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let two = T::from_f64(2.0);
    image.map(|v| two * v - T::one())
}

fn check_image<T: Scalar>(image: &Tensor<T>, c: usize, h: usize, w: usize) -> Result<()> {
    if image.shape() != [c, h, w] {
        return Err(shape_err("image", image.shape(), &[c, h, w]));
    }
    Ok(())
}

/// Linear patch projection, learned `[CLS]` token and position embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
}

impl PatchEmbed {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, "patch.proj", cfg.patch_dim(), cfg.dim, rng);
        let cls = store.add("patch.cls", Tensor::zeros([1, cfg.dim]));
        let pos = store.add("patch.pos", trunc_normal(cfg.seq_len(), cfg.dim, POS_INIT_STD, rng));
        Self { proj, cls, pos }
    }

    /// Tokens `F_0 = [cls; patches·W + b] + pos` for each image, stacked.
    /// Pixels are expected in `[0, 1]` and normalised here.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        images: &[&Tensor<T>],
    ) -> Result<Ragged> {
        if images.is_empty() {
            return Err(contract("no images to embed"));
        }
        let n = cfg.num_patches();
        let mut stacked = Vec::with_capacity(images.len() * n * cfg.patch_dim());
        for img in images {
            check_image(img, cfg.channels, cfg.image_height, cfg.image_width)?;
            stacked.extend_from_slice(patchify(&normalize_pixels(img), cfg.patch_size)?.data());
        }
        let x = tape.constant(Tensor::matrix(images.len() * n, cfg.patch_dim(), stacked));
        let proj = self.proj.forward(tape, store, x)?;
        let cls = tape.param(store, self.cls);
        let all = tape.concat_rows(&[cls, proj])?;
        let mut idx = Vec::with_capacity(images.len() * (n + 1));
        let mut pos_idx = Vec::with_capacity(images.len() * (n + 1));
        for b in 0..images.len() {
            idx.push(0);
            idx.extend((0..n).map(|i| 1 + b * n + i));
            pos_idx.extend(0..=n);
        }
        let tokens = tape.gather_rows(all, &idx)?;
        let pos = tape.param(store, self.pos);
        let pos = tape.gather_rows(pos, &pos_idx)?;
        let tokens = tape.add(tokens, pos)?;
        Ok(Ragged::uniform(tokens, images.len(), n + 1))
    }
}

/// Either kind of instruction, ready for encoding.
#[derive(Clone, Debug, PartialEq)]
pub enum InstructionInput<'a, T> {
    Text(&'a [String]),
    /// Clothes image, `channels × instruction_image_height × instruction_image_width`,
    /// pixels in `[0, 1]`.
    Image(&'a Tensor<T>),
}

/// Instruction encoder: separate text/image input projections feeding a
/// shared stack of transformer blocks. Output is the full token sequence
/// `F_T` (`M × C`).
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionEncoder {
    pub token_emb: ParamId,
    pub text_pos: ParamId,
    pub img_proj: Linear,
    pub img_pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl InstructionEncoder {
    pub const PREFIX: &'static str = "instr.";

    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.dim;
        let token_emb = store.add("instr.tok_emb", trunc_normal(cfg.vocab_size, d, INIT_STD, rng));
        let text_pos = store.add("instr.text_pos", trunc_normal(cfg.max_text_len, d, INIT_STD, rng));
        let img_proj = Linear::new(store, "instr.img_proj", cfg.patch_dim(), d, rng);
        let img_pos = store.add(
            "instr.img_pos",
            trunc_normal(cfg.instruction_patches(), d, INIT_STD, rng),
        );
        let blocks = (0..cfg.encoder_blocks)
            .map(|i| Block::new(store, &format!("instr.block{i}"), d, cfg.mlp_ratio, rng))
            .collect();
        let norm = LayerNorm::new(store, "instr.norm", d);
        Self {
            token_emb,
            text_pos,
            img_proj,
            img_pos,
            blocks,
            norm,
        }
    }

    fn embed_text<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        sentences: &[String],
    ) -> Result<Var> {
        let ids = token_ids(sentences, cfg.vocab_size);
        if ids.is_empty() {
            return Err(contract("empty instruction"));
        }
        if ids.len() > cfg.max_text_len {
            return Err(contract(format!(
                "instruction has {} tokens, limit is {}",
                ids.len(),
                cfg.max_text_len
            )));
        }
        let emb = tape.param(store, self.token_emb);
        let tok = tape.gather_rows(emb, &ids)?;
        let pos = tape.param(store, self.text_pos);
        let pos = tape.rows(pos, 0, ids.len())?;
        tape.add(tok, pos)
    }

    fn embed_image<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        template: &Tensor<T>,
    ) -> Result<Var> {
        check_image(
            template,
            cfg.channels,
            cfg.instruction_image_height,
            cfg.instruction_image_width,
        )?;
        let patches = patchify(&normalize_pixels(template), cfg.patch_size)?;
        let x = tape.constant(patches);
        let x = self.img_proj.forward(tape, store, x)?;
        let pos = tape.param(store, self.img_pos);
        tape.add(x, pos)
    }

    /// Encodes each instruction into its own `M_i × C` sequence.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        inputs: &[InstructionInput<'_, T>],
    ) -> Result<Ragged> {
        if inputs.is_empty() {
            return Err(contract("no instructions to encode"));
        }
        let mut parts = Vec::with_capacity(inputs.len());
        for inp in inputs {
            parts.push(match inp {
                InstructionInput::Text(s) => self.embed_text(tape, store, cfg, s)?,
                InstructionInput::Image(t) => self.embed_image(tape, store, cfg, t)?,
            });
        }
        let mut x = Ragged::stack(tape, &parts)?;
        for blk in &self.blocks {
            x = blk.forward(tape, store, cfg.heads, &x)?;
        }
        let tokens = self.norm.forward(tape, store, x.tokens)?;
        Ok(Ragged {
            tokens,
            spans: x.spans,
        })
    }
}
