//! Minimal tensor + reverse-mode autodiff engine: enough for SIREN MLPs, a
//! compact convolutional denoiser, MSE losses through an opaque linear
//! operator, and Adam.

pub mod adam;
pub mod io;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, adam_step_default, AdamState};
pub use model::{
    convnet_on, forward_convnet, forward_mlp, mlp_on, timestep_embedding, Activation,
    ConvLayerSpec, ConvSpec, MlpSpec,
};
pub use params::{ParamEntry, ParamSet};
pub use tape::{Node, Tape};
pub use tensor::Tensor;
