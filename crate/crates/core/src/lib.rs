//! Shared frozen encoder for many text-classification tasks: multi-task
//! pretraining, layer/position pooling, quantized feature storage and an
//! amortized cost model.

pub mod cli;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod pooling;
pub mod quant;
pub mod rng;
pub mod store;
pub mod tasks;
pub mod training;
pub mod tensor;
mod wire;

pub use encoder::{EncoderConfig, EncoderModel, LayerFeatures, TokenSeq};
pub use error::{Error, Result};
pub use pooling::{PoolingChoice, PoolingSpec};
pub use quant::{QuantMode, QuantOrder, QuantScheme};
pub use store::{FeatureRecord, FeatureStore, PoolingStage};
pub use tasks::{Example, TaskDataset};
pub use tensor::Tensor;

// The guide's Rust blocks run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/pooling.md")]
    mod pooling {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/feature-store.md")]
    mod feature_store {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
