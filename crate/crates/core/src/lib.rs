//! Mask-guided attention and feature augmentation for ultra-fine-grained
//! image classification, at desk scale.
//!
//! Region masks become L1-normalized ground-truth attention maps
//! ([`mask`]); two attention heads learn to reproduce them from an
//! intermediate feature map and reweight it ([`attention`]); a small CNN
//! ([`model`]) is trained with cross-entropy plus the attention losses on
//! procedurally generated leaf data ([`synth`]). Detection quality of the
//! region annotations is scored with IoU and mAP ([`detect`]).
//!
//! Differentiation runs on a small reverse-mode tape ([`tape`]) checked by
//! central differences ([`gradcheck`]).

pub mod attention;
pub mod config;
pub mod detect;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod mask;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
