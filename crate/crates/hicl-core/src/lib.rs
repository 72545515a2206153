//! HiCL: a hippocampal-style continual-learning engine.
//!
//! The model encodes inputs through a shared dense backbone, per-expert
//! sinusoidal grid layers, sparse top-k separation codes, a refinement MLP
//! and an integration head. Experts are selected by cosine similarity
//! between live separation codes and per-expert EMA prototypes, training
//! runs a two-phase specialization/consolidation schedule per task, and a
//! benchmark harness handles the task-incremental protocol, diagnostics
//! and FLOPs accounting.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod replay;
pub mod rng;
pub mod router;
pub mod tensor;
pub mod trainer;

pub use checkpoint::CheckpointData;
pub use config::RunConfig;
pub use data::{TaskData, TaskStream};
pub use encoder::{DgCode, EncoderConfig, IntegratedCode};
pub use error::{HiclError, Result};
pub use flops::FlopsReport;
pub use metrics::{MetricsEvent, MetricsReport};
pub use model::HiclModel;
pub use objectives::{FisherInfo, LossWeights};
pub use replay::{ReplayBuffer, ReplayItem};
pub use router::{GateDecision, GatingMode, Prototype};
pub use tensor::Tensor;
pub use trainer::Trainer;
