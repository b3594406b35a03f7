//! Federated deep generalized method of moments for instrumental-variables
//! regression.
//!
//! The crate covers the pieces needed to run and inspect FedGDA on the
//! DeepGMM minimax game: small MLPs with exact gradients ([`nn`]), the
//! per-client moment objective ([`objective`]), synthetic IV scenarios and
//! Dirichlet client splits ([`scenario`]), local optimizers ([`optim`]), the
//! synchronous federated loop ([`runtime`]), equilibrium diagnostics
//! ([`diagnostics`]) and config-driven experiments ([`experiment`]).

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod runtime;
pub mod scenario;
pub mod seeds;

pub use error::{Error, Result};
pub use nn::{Activation, InitScheme, MlpSpec, ParamVector};
pub use objective::{TildeAnchor, TildeSchedule};
pub use optim::{OptimizerConfig, OptimizerKind};
pub use runtime::{FedConfig, FedState};
pub use scenario::{ClientShard, IvDataset, ResponseKind, ScenarioSpec};
