//! The trainable noise predictor and the small autodiff tape it runs on.

mod graph;
mod tensor;
mod unet;

pub use graph::{Graph, ParamStore, Var};
pub use tensor::{Real, Tensor};
pub use unet::{
    images_to_tensor, tensor_to_images, time_embedding, Activation, EpsNet, EpsilonPredictor,
    NetworkConfig, Normalization, ParamSet,
};
