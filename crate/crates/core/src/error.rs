use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty ({0})")]
    EmptyCloud(&'static str),

    #[error("degenerate point cloud: all points coincide, scale factor is zero")]
    DegenerateCloud,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("value {value} is outside the domain {domain}")]
    OutOfDomain { value: f64, domain: &'static str },

    #[error(
        "least-squares system is underdetermined ({rows} equations, {unknowns} unknowns) \
         and lambda = 0; use a ridge weight lambda > 0"
    )]
    Underdetermined { rows: usize, unknowns: usize },

    #[error("no control descriptors selected for part")]
    NoDescriptors,

    #[error("all descriptors coincide with the part center (r_max = 0)")]
    ZeroRadius,

    #[error("part window of {window} px does not fit a {width}x{height} image")]
    WindowTooLarge {
        window: usize,
        width: usize,
        height: usize,
    },

    #[error("no valid parts could be extracted")]
    NoParts,

    #[error("no votes to aggregate")]
    NoVotes,

    #[error("model is fully outside the view frustum")]
    OutsideFrustum,

    #[error("hypothesis depth map has no valid pixel")]
    EmptyHypothesis,

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
