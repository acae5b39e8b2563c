//! Channel attention inside a small self-contained neural-network framework.

pub mod attention;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod layers;
pub mod model;
pub mod param;
pub mod tensor;

pub use attention::{AttentionSpec, GateKind, Mechanism};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use graph::{Gradients, Graph, OpCounter, Var};
pub use layers::Mode;
pub use model::{build_mobilenet_v2, Model, ModelConfig, Placement, Site, Variant};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
