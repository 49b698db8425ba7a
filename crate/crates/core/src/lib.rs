//! Multi-task LoRA training with conflict-aware orthogonal gradient
//! projection.
//!
//! The crate is organized bottom-up:
//!
//! * [`dense`]: row-major `f64` matrices and the seeded [`Rng`].
//! * [`lora`]: low-rank adapters over frozen weights.
//! * [`model`]: a small multi-task network with analytic gradients and a
//!   finite-difference oracle.
//! * [`surgery`]: conflict detection, flat and per-matrix projection.
//! * [`optim`]: AdamW and the linear decay schedule.
//! * [`synth`]: synthetic task families with tunable conflict.
//! * [`trainer`]: the training step in every mode and the experiment loop.
//! * [`config`], [`report`], [`cli`]: JSON configs, CSV metrics, summary
//!   tables and the command-line front end.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod config;
pub mod dense;
pub mod error;
pub mod lora;
pub mod model;
pub mod optim;
pub mod report;
pub mod surgery;
pub mod synth;
pub mod trainer;

pub use config::ExperimentConfig;
pub use dense::{Matrix, Rng};
pub use error::{Error, Result};
pub use lora::{FrozenLayer, LoraAdapter};
pub use model::{BlockId, MultiTaskModel, TaskBatch, TaskGradient, TaskKind, Targets, Update};
pub use optim::{AdamWConfig, AdamWState};
pub use surgery::{ConflictReport, ProjectAgainst, ProjectionScope};
pub use synth::SyntheticTaskSet;
pub use trainer::{MetricsLog, TrainMode, Trainer};
