//! Typed layer graphs: construction, forward tapes, backpropagation of the
//! classification loss, SGD with momentum and clipping, batchnorm fusion,
//! and checkpoint serialization.

pub mod backbones;
mod backward;
mod forward;
mod fuse;
mod model;
mod optim;
pub mod record;
mod serialize;

pub use backward::{
    attenuated_step, backward_classification, backward_sample, input_gradient, BackwardPass,
    ParamGrads, ReluRule,
};
pub use forward::{cross_entropy, forward, forward_sample, logits, predict, softmax, ActivationTape, BatchTape};
pub(crate) use forward::conv_dims_of;
pub use fuse::{avgpool_as_conv, fuse_batchnorm, fuse_model, FusedModel, Origin};
pub use model::{BatchNormParams, LayerKind, LayerNode, Model, ModelBuilder, NodeId};
pub use optim::{sgd_step, SgdState, TrainConfig};
pub use serialize::{load_model, read_model, save_model, write_model};
