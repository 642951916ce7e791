pub mod autodiff;
pub mod model;

pub use autodiff::{GradStore, Graph, NodeId, ParamId, ParamStore, RmsOptimizer};
pub use model::{ArchConfig, DiscNodes, GanModel, ImageGenerator, Mode};
