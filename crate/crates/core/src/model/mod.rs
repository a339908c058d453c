//! The retrieval model: query-image encoder with editing layers, instruction
//! encoder, fusion module and classifier heads.

pub mod config;
pub mod editing;
pub mod encoders;
pub mod layers;
pub mod tokenizer;

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

pub use config::ModelConfig;
pub use editing::{EditingLayer, EditingTransformer, Fusion, FusionBlock};
pub use encoders::{normalize_pixels, patchify, InstructionEncoder, InstructionInput, PatchEmbed};
pub use layers::{Block, LayerNorm, Linear, Mlp, Ragged};

use crate::error::{contract, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub num_ids: usize,
    pub patch: PatchEmbed,
    pub instr: InstructionEncoder,
    pub editing: EditingTransformer,
    pub fusion: Fusion,
    /// Identity classifier on `F`.
    pub id_head: Linear,
    /// Identity classifier on `F_out`.
    pub id_out_head: Linear,
    /// Positive/negative pair classifier on `F_out`; the positive class is
    /// index 1.
    pub match_head: Linear,
}

impl Model {
    /// Registers every parameter in `store`. The instruction encoder is marked
    /// frozen when the config asks for it.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        config: ModelConfig,
        num_ids: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if num_ids == 0 {
            return Err(contract("at least one identity class is required"));
        }
        let c = &config;
        let patch = PatchEmbed::new(store, c, rng);
        let instr = InstructionEncoder::new(store, c, rng);
        let editing = EditingTransformer::new(store, c.dim, c.heads, c.layers, c.mlp_ratio, rng);
        let fusion = Fusion::new(store, c.dim, c.fusion_blocks, c.mlp_ratio, rng);
        let id_head = Linear::new(store, "head.id", c.dim, num_ids, rng);
        let id_out_head = Linear::new(store, "head.id_out", c.dim, num_ids, rng);
        let match_head = Linear::new(store, "head.match", c.dim, 2, rng);
        store.set_frozen_prefix(InstructionEncoder::PREFIX, c.instruction_encoder_frozen);
        Ok(Self {
            config,
            num_ids,
            patch,
            instr,
            editing,
            fusion,
            id_head,
            id_out_head,
            match_head,
        })
    }

    /// [`Model::init`] driven by a ChaCha8 stream seeded with `seed`.
    pub fn init_seeded<T: Scalar>(
        config: ModelConfig,
        num_ids: usize,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self::init(config, num_ids, store, &mut rng)
    }

    pub fn encode_instructions<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &[InstructionInput<'_, T>],
    ) -> Result<Ragged> {
        self.instr.forward(tape, store, &self.config, inputs)
    }

    /// `F` (`B × C`) for each image. With `instr = None` the editing layers
    /// run without their instruction branch.
    pub fn encode_images<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        images: &[&Tensor<T>],
        instr: Option<&Ragged>,
    ) -> Result<Var> {
        if let Some(t) = instr {
            if t.batch() != images.len() {
                return Err(contract(alloc::format!(
                    "{} instructions for {} images",
                    t.batch(),
                    images.len()
                )));
            }
        }
        let f0 = self.patch.forward(tape, store, &self.config, images)?;
        self.editing
            .forward(tape, store, self.config.heads, &f0, instr)
    }

    /// `F_out` (`B × C`).
    pub fn fuse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: Var,
        instr: &Ragged,
    ) -> Result<Var> {
        if tape.shape(f).0 != instr.batch() {
            return Err(contract("fusion batch mismatch"));
        }
        self.fusion.forward(tape, store, self.config.heads, f, instr)
    }

    pub fn id_logits<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        self.id_head.forward(tape, store, f)
    }

    pub fn id_out_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_out: Var,
    ) -> Result<Var> {
        self.id_out_head.forward(tape, store, f_out)
    }

    pub fn match_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_out: Var,
    ) -> Result<Var> {
        self.match_head.forward(tape, store, f_out)
    }
}

/// Mean over the tokens of each instruction sequence (`B × C`).
pub fn mean_pool<T: Scalar>(tape: &mut Tape<T>, x: &Ragged) -> Result<Var> {
    let mut rows = Vec::with_capacity(x.batch());
    for b in 0..x.batch() {
        let s = x.sequence(tape, b)?;
        rows.push(tape.mean_rows(s));
    }
    tape.concat_rows(&rows)
}
