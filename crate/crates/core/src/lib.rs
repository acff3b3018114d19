//! Overlapping multitask graph-convolutional variational autoencoder for
//! featured networks.

pub mod datasets;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use graph::{NormalizedAdjacency, SparseAdjacency};
pub use loss::{LossBreakdown, LossConfig, TrainingData};
pub use matrix::DenseMatrix;
pub use model::{
    AdjacencyDecoder, Checkpoint, DimensionSplit, FeatureHead, GradientSet, ModelConfig,
    ModelWeights,
};
pub use synth::{FeatureConfig, FeaturedGraph, SbmConfig};
pub use train::{TrainConfig, TrainOutcome, TrainTrace};
