//! Local patch detector: network layers, architecture, checkpoints and training.

mod attention;
mod dct;
mod layers;
mod network;
mod tensor;
mod train;

pub use attention::{ChannelAttention, SpatialAttention};
pub use dct::{dct2d, dct_basis, idct2d};
pub use layers::{
    selu, sigmoid, Activation, ActivationKind, BatchNorm2d, Conv2d, Dense, DepthwiseConv2d,
    GlobalAvgPool, MaxPool2, Module, SeparableConv2d, SELU_ALPHA, SELU_LAMBDA,
};
pub use network::{
    check_attention_placement, check_channel_doubling, softmax_cross_entropy, softmax_fake,
    Detector, DetectorConfig, DetectorParams, FeatureMode, LayerKind, LayerSpec, ResidualBlock,
    TensorRecord, CHECKPOINT_VERSION,
};
pub(crate) use tensor::gemm;
pub use tensor::{Param, Tensor};
pub use train::{
    accuracy, read_training_log, train, train_with_validator, write_training_log, EarlyStopping,
    EpochLog, PatchSet, StopDecision, TrainConfig, TrainOutcome,
};
