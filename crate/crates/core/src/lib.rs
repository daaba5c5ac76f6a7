//! Segment-aware positional embeddings for masked-LM pretraining and
//! fine-tuning of a small bidirectional transformer.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod embeddings;
pub mod encoder;
pub mod example;
pub mod example_file;
pub mod finetune;
pub mod metrics;
pub mod gradcheck;
pub mod heads;
pub mod mlm;
pub mod model;
pub mod parallel;
pub mod params;
pub mod probe;
pub mod scalar;
pub mod segmenter;
pub mod synth;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;

pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type PretrainModel32 = model::PretrainModel<f32>;
pub type PretrainModel64 = model::PretrainModel<f64>;
pub type FinetuneModel32 = heads::FinetuneModel<f32>;
pub type FinetuneModel64 = heads::FinetuneModel<f64>;
