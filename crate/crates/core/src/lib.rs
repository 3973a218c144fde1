//! Task-level influence functions for meta-learning.
//!
//! Given meta-parameters `ω̂` trained on a set of few-shot tasks, this crate
//! estimates how upweighting one training task (or a group of them) would
//! change `ω̂`, the weights adapted to a test task, and that test task's loss.
//! The meta-Hessian can be formed exactly or through a compressed
//! Gauss-Newton factor, and is inverted with optional eigenvalue pruning.

pub mod error;
pub mod experiments;
pub mod hessian;
pub mod influence;
pub mod io;
pub mod linalg;
pub mod metalearn;
pub mod model;
pub mod taskgen;

pub use error::{Error, Result};
pub use hessian::{HessianMethod, HessianRep, HessianVariant, SpectralInverse};
pub use influence::{InfluenceRecord, ScoreTable, SignConvention};
pub use linalg::{FactorMatrix, Keep, Matrix, SymMatrix};
pub use metalearn::{Learner, MetaParams, Optimizer, Provenance, Task, TrainConfig};
pub use model::{Activation, Batch, Mlp, MlpSpec};
pub use taskgen::{DegradeParams, DegradeScope, TaskDistributionSpec, TaskKind};
