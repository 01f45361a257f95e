//! Random selection probing: detect whether two language models are related
//! by optimizing adversarial prefixes on a reference model and statistically
//! testing whether they transfer to a target model.

pub mod micromodel;
pub mod rng;

pub use micromodel::{MicroLm, MicroVlm, ModelConfig, TrainCorpus, Vocab};
