use thiserror::Error;

/// Errors raised anywhere in the pose pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown joint name `{name}`; valid names: {valid}")]
    UnknownJoint { name: String, valid: String },

    #[error("bone edge ({parent}, {child}) does not reference valid joints")]
    InvalidEdge { parent: usize, child: usize },

    #[error("bone `{bone}` has zero length in the canonical pose")]
    ZeroLengthBone { bone: String },

    #[error("invalid bone group: {0}")]
    InvalidBoneGroup(String),

    #[error("{dataset} record has {found} joints, expected {expected}")]
    JointCount {
        dataset: String,
        expected: String,
        found: usize,
    },

    #[error("{dataset} record is missing joint `{joint}`")]
    MissingJoint { dataset: String, joint: String },

    #[error("degenerate depth scale: every 3D joint projects onto the root")]
    DegenerateScale,

    #[error("depth scale must be finite and positive, got {0}")]
    NonPositiveScale(f64),

    #[error("joint {joint} has non-positive camera depth {z}")]
    NonPositiveDepth { joint: usize, z: f64 },

    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("pose frame mismatch: {0}")]
    FrameMismatch(String),

    #[error("no visible joints")]
    NoVisibleJoints,

    #[error("sample {sample} has a zero-length head segment")]
    ZeroHeadSegment { sample: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("stage order violated: {0}")]
    StageOrder(String),

    #[error("training diverged in stage {stage} epoch {epoch} batch {batch}: loss = {loss}")]
    Divergence {
        stage: String,
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("3D record requires camera parameters to produce its 2D pose")]
    MissingCamera,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
