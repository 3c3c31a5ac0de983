//! memtrack: a self-supervised dense tracker at desk scale.
//!
//! The library trains a convolutional feature encoder by reconstructing video
//! frames in an information-bottlenecked color space (one channel randomly
//! dropped from the encoder inputs), then propagates first-frame instance
//! masks through a sequence with two-stage restricted attention over a
//! short+long-term memory bank, and scores the result with region/contour
//! metrics plus a seen/unseen generalization gap.
//!
//! Module map:
//! - [`colorspace`]: RGB/Lab/HSV conversions, normalization, channel dropout
//! - [`encoder`]: the Siamese feature extractor, alignment sampler, checkpoints
//! - [`attention`]: windows, heatmaps, soft-argmax, resampling, affinity, copy
//! - [`memory`]: reference-frame selection and dilation schedule
//! - [`objective`]: Huber regression and quantized-color classification losses
//! - [`propagation`]: mask propagation and upsampling
//! - [`metrics`]: J, F, generalization gap, reports
//! - [`data`]: synthetic moving-shapes generator and sequence I/O
//! - [`train`] / [`cli`]: the two-phase schedule and command entry points
//!
//! The `examples/` directory has one runnable walkthrough per capability;
//! start with `cargo run --example end_to_end`.

pub mod attention;
pub mod cli;
pub mod colorspace;
pub mod data;
pub mod encoder;
pub mod error;
pub mod memory;
pub mod metrics;
mod nn;
pub mod objective;
pub mod propagation;
pub mod train;

pub use colorspace::{apply_channel_dropout, convert, ColorSpace, DropoutSpec, Image};
pub use encoder::{
    align_sample, align_sample_mask, load_checkpoint, save_checkpoint, Encoder, EncoderConfig,
    EncoderVariant, FeatureMap, FEATURE_STRIDE,
};
pub use error::{Error, Result};
pub use memory::{dilation_for, select_frames, BankPolicy, MemoryEntry};
pub use metrics::{contour_accuracy, generalization_gap, region_similarity};
pub use objective::{classification_loss, huber_loss, ColorQuantizer, LossValue};
pub use propagation::{
    propagate_sequence, upsample_mask, LabelMap, PropagationConfig, PropagationMode,
    PropagationOutput,
};
pub use train::{train, LossKind, RunConfig, TrainDataset};
