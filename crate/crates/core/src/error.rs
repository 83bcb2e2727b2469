use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("expected a scalar tensor, found shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardConsumed,
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box has non-positive size (h = {h}, w = {w})")]
    NonPositiveSize { h: f64, w: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnchorError {
    #[error("anchor spec needs at least one scale and one ratio")]
    EmptySpec,
    #[error("feature map must be at least 1x1, got {h}x{w}")]
    EmptyFeatureMap { h: usize, w: usize },
    #[error("thresholds must satisfy 0 <= neg < pos <= 1 (neg = {neg}, pos = {pos})")]
    Thresholds { neg: f64, pos: f64 },
    #[error("{0}")]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("cannot form triplets: {0}")]
    DeficientClass(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image size {h}x{w} must be divisible by the backbone stride {stride}")]
    Divisibility { h: usize, w: usize, stride: usize },
    #[error("expected {expected} anchors for the head output, found {found}")]
    AnchorCount { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("scene generation failed: {0}")]
    Infeasible(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: non-finite {component}")]
    Diverged {
        iteration: usize,
        component: &'static str,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("s_nr needs at least one negative image")]
    NoNegativeImages,
    #[error("{0}")]
    Invalid(String),
}
