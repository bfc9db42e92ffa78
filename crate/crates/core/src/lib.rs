//! Fault-tolerance workbench for small neural networks.
//!
//! The crate bundles a reverse-mode autodiff engine, network builders for the
//! benchmark architectures, adversarial and baseline training loops, stuck-at-0
//! fault injection and the metrics used to compare trained models.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod fault;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod ops;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod train;

pub use arch::ArchitectureId;
pub use graph::{Graph, GraphError, NodeId};
pub use network::{Network, NetworkBuilder, NetworkError, Role};
pub use ops::Activation;
pub use tensor::{Scalar, Tensor, TensorError};
