//! Layers, parameter storage, initialisers and optimisers.

mod init;
mod layers;
mod optim;
mod params;
mod session;

pub use init::{fan_in, init_kaiming, init_orthogonal};
pub use layers::{build_chain, Chain, ChainOutput, LayerKind, LayerSpec, RowOutput};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Param, ParamStore};
pub use session::{Bindings, Mode, Session};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_LRELU_SLOPE: f64 = 0.2;
