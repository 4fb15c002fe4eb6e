//! Minimal dense reverse-mode differentiation engine.

mod graph;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod param;

pub use graph::{BatchStats, Graph, Var};
pub use optim::{sgd_step, LrSchedule, SgdConfig, SgdState};
pub use param::{ParamId, ParamStore, Parameter};
