//! Dense networks, losses, optimizer and EMA steps, and the gradient checker.

pub mod gradcheck;
pub mod loss;
pub mod net;

pub use net::{
    backward, ema_update, forward, sgd_step, Activation, ForwardCache, Gradients, Layer,
    Modality, ModelPair, Network,
};
