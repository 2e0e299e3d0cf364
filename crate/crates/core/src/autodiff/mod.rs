//! Reverse-mode automatic differentiation, optimizers and the on-disk
//! tensor container.

pub mod container;
pub mod graph;
pub mod optim;
pub mod param;

pub use container::{Container, Entry};
pub use graph::{Gradients, Graph, Op, Var};
pub use optim::{Optimizer, OptimizerKind};
pub use param::{ParamId, ParamStore, Parameter};
