pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod growth;
pub mod metrics;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use autodiff::{AttnGeometry, Grads, Mode, Tape, Var};
pub use checkpoint::Checkpoint;
pub use data::{Batch, Pair, Vocab};
pub use error::{Error, Result};
pub use growth::{DepthGrowModel, GrowOptions, Regime, View};
pub use tensor::{Float, ParamId, ParamStore, Parameter, Precision, Tensor};
pub use training::{Adam, TrainConfig};
pub use transformer::ModelConfig;
