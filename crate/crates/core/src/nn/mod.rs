//! Minimal decoder-only transformer: deterministic forward with hidden-state
//! capture, FFN activation hooks, and reverse-mode gradients.

mod checkpoint;
mod config;
mod decode;
mod forward;
mod gradients;
mod intervention;
mod model;
mod tensor;

pub use checkpoint::CHECKPOINT_VERSION;
pub use config::ModelConfig;
pub use decode::argmax;
pub use forward::{ForwardOutput, HiddenTrace};
pub use gradients::NeuronGradients;
pub use intervention::{Action, ActivationHook, InterventionSpec, NeuronRef, PatchAll};
pub use model::{LayerWeights, TensorMut, TransformerModel, Weights};
pub use tensor::Matrix;

pub(crate) use gradients::teacher_forced;
pub(crate) use tensor::log_softmax;
