//! Neural reconstruction networks on a small reverse-mode autodiff tape.

pub mod denormal;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod tape;
pub mod train;
pub mod unet;

pub use error::{NnError, Result};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{Gradients, Graph, NodeId, ParamId, ParamStore, Real};
pub use unet::{complex_conv, sample_features, ComplexConvSpec, UNet, UNetConfig};
pub use model::{
    encode_spatial, encode_temporal, wire_activate, BranchMode, BranchOutputs, Encoding, KpinrModel, ModelConfig,
};
pub use train::{
    hdr_loss, lr_at, masked_mse, reconstruct_image, LossRecord, LossWeights, NoObserver, ReconOutput, TrainConfig,
    TrainObserver, TrainSchedule, TrainState, Trainer,
};
