//! Instruction-conditioned person retrieval, desk-scale.
//!
//! The crate is `no_std` and only needs `alloc`. It contains everything that
//! is pure computation:
//!
//! * [`tape`]: a define-by-run reverse-mode autodiff tape over 2-D tensors,
//!   with [`gradcheck`] as the finite-difference oracle and [`optim`] for
//!   AdamW with linear warmup.
//! * [`model`]: patch embedding, the instruction encoder, the editing
//!   transformer built from zero-initialised gated cross-attention layers,
//!   and the fusion module.
//! * [`loss`]: relatedness, the adaptive triplet loss, identity/contrastive/
//!   matching losses and their task-level sums, plus triplet mining.
//! * [`instruct`]: task kinds, the fixed phrase banks and the attribute
//!   templater.
//! * [`synth`]: the procedural identity dataset, P×K sampling and
//!   augmentation.
//! * [`eval`]: mAP / CMC with camera filtering, cross-modality modes and the
//!   two-stage text-to-image rerank.
//! * [`train`]: one optimisation step per task batch.
//! * [`protocol`]: per-task query/gallery construction and embedding of the
//!   test split.
//!
//! File formats, the CLI and anything touching the OS live in the `irk`
//! crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod instruct;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod protocol;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
