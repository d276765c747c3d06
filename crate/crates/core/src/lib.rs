//! Core library for diffusion-generated dynamic-neuron knowledge editing.
//!
//! The crate is organized as a pipeline of modules:
//!
//! - [`numerics`]: tensors, autodiff, optimizers, seeded RNG, tensor files
//! - [`corpus`]: synthetic fact corpus and word-level tokenizer
//! - [`toy_lm`]: decoder-only language model with a single-neuron attach point
//! - [`text_encoder`]: contrastively tuned query encoder
//! - [`familiarity`]: entropy-based routing classifier
//! - [`collector`]: per-fact neuron weight optimization
//! - [`weight_gen`]: conditional diffusion over collected neuron weights
//! - [`edit_engine`]: encode, route, generate, attach, respond
//! - [`evalkit`]: reliability, generality, locality metrics and the score

pub mod collector;
pub mod corpus;
pub mod edit_engine;
pub mod evalkit;
pub mod familiarity;
pub mod numerics;
pub mod text_encoder;
pub mod toy_lm;
pub mod weight_gen;

pub use numerics::{Graph, Optimizer, Rng, Tensor, Var};
