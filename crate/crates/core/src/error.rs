use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("all points are collinear in the reference view")]
    Collinear,
    #[error("points {0} and {1} coincide in the reference view")]
    DuplicatePoint(usize, usize),
    #[error("point {0} is not tracked in the reference view")]
    UntrackedInReference(usize),
    #[error("degenerate triangle")]
    DegenerateTriangle,
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("normal is not unit length (norm {0})")]
    NonUnitNormal(f64),
    #[error("under-constrained photometric problem: {0}")]
    UnderConstrained(String),
    #[error("patch stack has no observed entries")]
    AllUnobserved,
    #[error("normal field is empty")]
    EmptyNormalField,
    #[error("triangles {0} and {1} are not adjacent")]
    NotAdjacent(usize, usize),
    #[error("triangle id mismatch: expected {expected}, got {got}")]
    TriangleMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("refinement diverged: energy rose from {before} to {after}")]
    Diverged { before: f64, after: f64 },
    #[error("no usable patches")]
    NoUsablePatches,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
