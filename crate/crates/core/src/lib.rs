//! Collaborative-filtering embedding-scaling lab.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom pin the common choices.

pub mod data;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod models;
pub mod objectives;
pub mod scalar;
pub mod theory;
pub mod trainer;

pub use data::{Dataset, DatasetStats, Interaction, InteractionFormat, NoiseSpec, SplitSpec};
pub use error::{Error, Result};
pub use evaluator::{evaluate, ndcg_at_k, MetricReport};
pub use graph::{Aggregation, AugmentKind, AugmentSpec, NormAdj};
pub use models::{init_params, ModelKind, Params, Scorer, SglConfig, Tower};
pub use objectives::{Batch, DropConfig, DropMode, Objective, Triple};
pub use scalar::Scalar;
pub use theory::{BoundReport, MixupReport, QuadraticInstance, SubspaceReport};
pub use trainer::{adam_step, train, train_from, AdamState, TrainConfig, TrainHistory};

pub type Params32 = Params<f32>;
pub type Params64 = Params<f64>;
pub type NormAdj32 = NormAdj<f32>;
pub type NormAdj64 = NormAdj<f64>;
