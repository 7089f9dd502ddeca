//! Tensor core: layers with exact gradients, a recording tape and RMSProp.
//!
//! Values are `f64` in memory. Anything persisted (weights, feature maps) is
//! narrowed to `f32`; trainable state is kept f32-representable so saving and
//! reloading a model is lossless.

pub mod ops;
mod optim;
mod tape;
mod tensor;
mod weights;

pub use ops::{Mode, Padding};
pub use optim::{rmsprop_step, OptimizerConfig, Parameter};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
pub use weights::{
    decode_weights, encode_weights, load_weights, save_weights, NamedTensors, FCNW_MAGIC,
    FCNW_VERSION,
};

/// Rounds every element to the nearest f32.
pub fn round_to_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}
