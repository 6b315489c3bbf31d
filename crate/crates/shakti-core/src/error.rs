//! Crate-wide error types.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Umbrella error for all fallible operations in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors raised by tensor construction and tensor operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of bounds for shape {shape:?}")]
    AxisOutOfBounds {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape; record a fresh forward pass first")]
    BackwardReplayed,
    #[error("{op}: operands were recorded on different tapes")]
    TapeMismatch { op: &'static str },
    #[error("cross_entropy: every position in the batch is masked out")]
    AllMasked,
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
}

/// Errors raised while decoding or encoding images.
#[derive(Debug, Error)]
pub enum ImageError {
    #[error("ppm parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("unsupported image format: expected binary ppm magic \"P6\", got {found:?}")]
    UnsupportedFormat { found: String },
    #[error("image dimensions {height}x{width} are invalid: {msg}")]
    BadDimensions {
        height: usize,
        width: usize,
        msg: String,
    },
    #[error("no patch size in {sizes:?} fits {height}x{width} within a budget of {budget} tokens")]
    NoFeasiblePatchSize {
        height: usize,
        width: usize,
        budget: usize,
        sizes: Vec<usize>,
    },
    #[error("cannot lay out {n_glyphs} glyphs on a {image_size}x{image_size} canvas: {msg}")]
    GlyphLayout {
        image_size: usize,
        n_glyphs: usize,
        msg: String,
    },
}

/// Errors raised while saving, loading or inspecting checkpoints.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic: expected \"SKVL\", got {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint config digest {found:#018x} does not match model config digest {expected:#018x}")]
    ConfigDigestMismatch { found: u64, expected: u64 },
    #[error("checkpoint checksum {found:#018x} does not match computed {computed:#018x}; file is corrupt")]
    ChecksumMismatch { found: u64, computed: u64 },
    #[error("checkpoint is truncated: needed {needed} more bytes while reading {what}")]
    Truncated { what: &'static str, needed: usize },
    #[error("checkpoint field {what}: {msg}")]
    Malformed { what: &'static str, msg: String },
    #[error("checkpoint tensor {name:?} has {found} elements but the model expects {expected}")]
    TensorShapeMismatch {
        name: String,
        found: usize,
        expected: usize,
    },
    #[error("checkpoint is missing tensor {name:?} required by the model")]
    MissingTensor { name: String },
}

/// Errors raised by the training loop and stage configuration.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step} (lr {lr:.3e}, max |grad| {grad_max:.3e})")]
    NonFiniteLoss { step: usize, lr: f64, grad_max: f64 },
    #[error("unknown freeze component {name:?}; expected one of encoder, projector, decoder")]
    UnknownComponent { name: String },
    #[error("data stream yielded no batches; nothing to train on")]
    EmptyStream,
    #[error("invalid stage config: {0}")]
    BadStageConfig(String),
    #[error("schedule step {step} outside [0, {total}]")]
    ScheduleBounds { step: usize, total: usize },
}
