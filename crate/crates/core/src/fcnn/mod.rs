//! Two-branch fully convolutional network and its patch-mode training.

pub mod layers;
pub mod network;
pub mod tensor;
pub mod train;

pub use layers::{ConvLayer, Layer, LayerSpec};
pub use network::{
    softmax_planes, Architecture, ConvGrad, ForwardTrace, Gradients, NetworkParameters, ProbabilityMaps,
};
pub use tensor::Tensor;
pub use train::{
    batch_loss, gradient_check, relative_error, sample_training_patches, train_step1, GradientCheck, PatchBatch,
    PatchGeometry, TrainingSchedule,
};
