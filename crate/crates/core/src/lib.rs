//! Amortized activation steering on a frozen generator, at desk scale.
//!
//! The crate implements the full loop: a synthetic concept world standing in
//! for an embedding dataset, a frozen toy generator with named hook sites
//! after each normalization layer, affine-elementwise interventions with a
//! bounded strength knob, four per-concept estimators (CAA, ITI, Linear-AcT,
//! LinEAS), a differentiable 1D Wasserstein alignment loss built on a
//! gradient-correct sort, and a hypernetwork that predicts interventions
//! from concept embeddings in one forward pass, trained end-to-end with
//! AdamW, a cosine schedule, and an EMA shadow.

pub mod error;
pub mod estimators;
pub mod eval;
pub mod generator;
pub mod hypernet;
pub mod loss;
pub mod rng;
pub mod steering;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use estimators::{EstimatorConfig, FitReport, Method};
pub use eval::EvalReport;
pub use generator::{
    ActivationRecord, ForwardModel, Generator, GeneratorConfig, HookSite, IdentityModel,
};
pub use hypernet::{HypernetConfig, HypernetState, ParamBreakdown};
pub use loss::LossConfig;
pub use steering::{InterventionNodes, InterventionParams};
pub use tape::{NodeId, SortResult, Tape};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainLog};
pub use world::{ConceptSpec, EncodeMode, SourcePool, Split, World, WorldConfig};

#[cfg(test)]
pub(crate) mod gradcheck;
