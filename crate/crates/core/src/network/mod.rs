//! Feed-forward network: fc, conv, maxpool, dropout and softmax-output layers
//! with hand-written backprop and the composite VR + L2' loss.

pub mod checkpoint;
mod model;
pub mod spec;

pub use model::{
    class_loss, Batch, ForwardCache, GradientParts, Gradients, LayerParams, LossTerms, Mode, NetworkModel,
    Regularization, PROB_FLOOR,
};
pub use spec::{Activation, Architecture, InputDecl, LayerKind, LayerSpec, Padding, Preset, Shape3};
