//! U-Net model: construction, inference, training, and the on-disk format.

mod persist;
mod train;
mod unet;

pub use persist::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{
    optimizer_step, train, EpochRecord, OptState, Optimizer, TrainConfig, TrainHistory,
};
pub use unet::{build_unet, forward_graph, param_specs, Model, OutputMode, ParamSpec, UNetConfig};
