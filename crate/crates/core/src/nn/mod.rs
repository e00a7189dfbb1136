//! Small trainable building blocks: a named parameter store, a dilated
//! 3x3 convolution stack with hand-derived reverse-mode gradients, Adam,
//! and the losses shared by the training stages.

mod adam;
mod loss;
mod net;
mod params;

pub use adam::{adam_step, cosine_lr, AdamConfig};
pub use loss::{mse, mse_grad, perceptual_proxy, perceptual_proxy_grad, DEFAULT_PROXY_GAMMA};
pub use net::{layer_stack_passes, net_backward, net_forward, ConvNet, ForwardTape, Grid, NetSpec, DEFAULT_DILATIONS};
pub use params::{Gradients, ModelParams, Param};
