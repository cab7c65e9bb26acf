pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod network;
pub mod objective;
pub mod optim;
pub mod pnm;
pub mod robustness;
pub mod trainer;
pub mod transform;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use network::{AttentionMaskSet, Forward, MultiAttrNet, NetConfig};
pub use objective::{Batch, LossBreakdown, LossWeights};
pub use transform::TransformParams;
pub use trainer::{Ablation, TrainConfig, TrainTrace};
