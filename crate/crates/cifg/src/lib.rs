//! cifg — continuous integrate-and-fire grounding.
//!
//! A desk-scale toolkit for visually grounded speech modeling: a small
//! reverse-mode autodiff engine, integrate-and-fire segmentation of speech
//! frames, codebook quantization, masked contrastive objectives, a synthetic
//! paired corpus with ground-truth alignments, and the training/evaluation
//! pipeline that ties them together.
//!
//! The accompanying guide under `book/` walks through each subsystem; its
//! code snippets double as doc-tests (see [`guide`]).

pub mod cif;
pub mod datagen;
pub mod encoders;
pub mod quantizer;
pub mod error;
pub mod eval;
pub mod losses;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
