//! Dense numerical substrate: layers, loss, optimizer and schedule.

pub mod graph;
pub mod loss;
pub mod optim;
pub mod params;
pub mod spec;

pub use graph::{backward, forward, predict, Cache, ConvGeom, Mode};
pub use loss::cross_entropy_loss;
pub use optim::{cosine_lr, sgd_step, SgdConfig, UpdateScope};
pub use params::{BnParams, BnState, DenseParams, GradStore, LayerGrads, LayerParams, ParamStore};
pub use spec::{LayerKind, LayerSpec, NetworkSpec};
