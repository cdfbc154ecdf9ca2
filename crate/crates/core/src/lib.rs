//! Few-shot unsupervised image-to-image translation on the CPU: corpus
//! handling, the translator and multi-class discriminator, adversarial
//! training, quantitative evaluation and one-shot classification with
//! generated data.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod evaluator;
pub mod fewshot;
pub mod generator;
pub mod losses;
pub mod presets;
pub mod synth;
pub mod trainer;

pub use kshot_tensor as tensor;

pub use config::Config;
pub use dataset::{Corpus, DatasetSpec};
pub use error::{Error, Result};
