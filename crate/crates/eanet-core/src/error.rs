//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid bounding box: w={w}, h={h} (both must be positive and finite)")]
    InvalidBox { w: f64, h: f64 },

    #[error("box does not overlap the image ({img_w}x{img_h})")]
    BoxOutsideImage { img_w: usize, img_h: usize },

    #[error(
        "sampling budget exhausted: found {found} of {requested} boxes in [{iou_lo}, {iou_hi}] after {attempts} attempts"
    )]
    SampleBudgetExhausted {
        requested: usize,
        found: usize,
        iou_lo: f64,
        iou_hi: f64,
        attempts: usize,
    },

    #[error("invalid IoU band [{lo}, {hi}]")]
    InvalidIouBand { lo: f64, hi: f64 },

    #[error("normal matrix is singular; use a positive ridge lambda")]
    SingularMatrix,

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{context}: input {got}x{got2} is smaller than the {kernel}x{kernel} kernel")]
    InputSmallerThanKernel {
        context: &'static str,
        got: usize,
        got2: usize,
        kernel: usize,
    },

    #[error("selection needs at least 2 candidates, got {got}")]
    TooFewCandidates { got: usize },

    #[error("aggregation expects exactly 5 branch outputs, got {got}")]
    BranchCountMismatch { got: usize },

    #[error("domain index {index} out of range (bank holds {count} domains)")]
    DomainOutOfRange { index: usize, count: usize },

    #[error("label {value} outside {{0, 1}}")]
    InvalidLabel { value: usize },

    #[error("requested top-{k} of {len} scores")]
    TopKOutOfRange { k: usize, len: usize },

    #[error("frame count mismatch: {rgb} visible frames vs {tir} infrared frames")]
    FrameCountMismatch { rgb: usize, tir: usize },

    #[error("frame {index}: visible is {rgb_w}x{rgb_h} but infrared is {tir_w}x{tir_h}")]
    FrameSizeMismatch {
        index: usize,
        rgb_w: u32,
        rgb_h: u32,
        tir_w: u32,
        tir_h: u32,
    },

    #[error("ground-truth length {gt} does not match frame count {frames}")]
    GroundTruthLengthMismatch { gt: usize, frames: usize },

    #[error("{path}:{line}: cannot parse annotation line {content:?}")]
    AnnotationParse {
        path: PathBuf,
        line: usize,
        content: String,
    },

    #[error("missing file or directory: {0}")]
    MissingPath(PathBuf),

    #[error("result file for sequence {sequence:?}: {problem}")]
    ResultFile { sequence: String, problem: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("training data is empty")]
    EmptyTrainingData,

    #[error("sequence {sequence:?} does not carry attribute {attribute}")]
    AttributeMismatch {
        sequence: String,
        attribute: &'static str,
    },

    #[error("degenerate initial box: w={w}, h={h} (need at least 2x2 px)")]
    DegenerateInit { w: f64, h: f64 },

    #[error("sequence {0:?} has no ground truth on its first frame")]
    MissingInitGroundTruth(String),

    #[error("prediction/ground-truth length mismatch: {pred} vs {gt}")]
    EvalLengthMismatch { pred: usize, gt: usize },

    #[error("unknown {what}: {value:?}")]
    UnknownName { what: &'static str, value: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
