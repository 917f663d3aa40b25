use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but data has {got}")]
    DataLength { shape: Vec<usize>, expected: usize, got: usize },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("input {index}: expected shape compatible with {expected:?}, got {got:?}")]
    InputMismatch { index: usize, expected: Vec<usize>, got: Vec<usize> },
    #[error("{op}: computed output size {height}x{width} is empty")]
    EmptyOutput { op: &'static str, height: i64, width: i64 },
    #[error("{0}: needs at least one input")]
    Empty(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("batch norm in eval mode requires running statistics")]
    MissingRunningStats,
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph failed validation:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<crate::graph::Violation>),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("duplicate layer `{0}`")]
    DuplicateLayer(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot fuse `{low}` ({low_size}) with `{high}` ({high_size}): no stride-2 upsampling maps {high_size} onto {low_size}")]
    FusionSize { low: String, low_size: usize, high: String, high_size: usize },
    #[error("missing weight `{0}`")]
    MissingWeight(String),
    #[error("weight `{name}` has shape {got:?}, expected {expected:?}")]
    WeightShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("graph has no prediction sources")]
    NoSources,
    #[error("image shape {got:?} does not match data layer {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("descriptor: {0}")]
    Descriptor(#[from] serde_json::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box has non-positive extent (w={w}, h={h})")]
    Degenerate { w: f64, h: f64 },
    #[error("box coordinate {0} outside the normalized image domain")]
    Domain(f64),
    #[error("match threshold {0} must lie in (0, 1)")]
    Threshold(f64),
    #[error("anchor configuration: {0}")]
    Config(String),
    #[error("variances must be positive")]
    Variance,
}

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("coefficient of variation needs a non-empty list with non-zero mean")]
    DegenerateSample,
    #[error("graph has no prediction sources")]
    NoSources,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("trainable set references unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("no gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("iteration {iter} out of range for phase {phase} ({total} iterations)")]
    IterRange { phase: usize, iter: usize, total: usize },
    #[error("phase {0} does not exist")]
    Phase(usize),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("bad magic {0:?}, expected \"ESWT\"")]
    Magic([u8; 4]),
    #[error("unsupported weight file version {0}")]
    Version(u32),
    #[error("tensor name is not UTF-8")]
    Name,
    #[error("malformed tensor `{0}`")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction rows ({got}) do not match anchor count ({expected})")]
    AnchorCount { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("evaluation thread pool: {0}")]
    Pool(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
}
