use thiserror::Error;

use crate::weights::Weights;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("point maps to infinity under the homography")]
    PointAtInfinity,
    #[error("query time {0} lies outside the keyed interval")]
    OutOfRange(f64),
    #[error("no hand detections on either side")]
    EmptyTrajectory,
    #[error("contact frame has no contact candidates")]
    NoCandidates,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("embedding dimension {0} is odd")]
    OddDimension(usize),
    #[error("decoder history is empty")]
    EmptyHistory,
    #[error("action {0} has no verb/noun mapping")]
    UnmappedAction(usize),
    #[error("no points to rasterize")]
    EmptyPoints,
    #[error("a visible hand needs at least two observations")]
    InsufficientObservations,
    #[error("ground truth has no visible hand")]
    NoVisibleGroundTruth,
    #[error("heatmap is all zero")]
    AllZero,
    #[error("ground-truth location list is empty")]
    EmptyGroundTruth,
    #[error("schema error: {0}")]
    Schema(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("every token category is ablated")]
    AllTokensAblated,
    #[error("conditioning mode {0} is not supported")]
    UnsupportedMode(&'static str),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, last_good: Box<Weights> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
