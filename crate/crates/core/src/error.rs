use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("density amplitude {density} does not exceed threshold {threshold}; isosurface is empty")]
    EmptyIsosurface { density: f64, threshold: f64 },

    #[error("scene contains no primitives")]
    EmptyScene,

    #[error("hit buffer overflow: more than {capacity} primitives overlap the segment")]
    BufferOverflow { capacity: usize },

    #[error("point coincides with the camera center")]
    DegenerateCenter,

    #[error("morton coordinate {0} does not fit in 21 bits")]
    MortonRange(u32),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("record {index}: {reason}")]
    Validation { index: usize, reason: String },

    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] ::image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
