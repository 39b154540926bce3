//! Part-level SE(3)-equivariant multi-body rigid segmentation and motion
//! estimation for point-cloud pairs, with an online unsupervised training
//! loop, a synthetic scene generator and an evaluation suite.

pub mod backbone;
pub mod checks;
pub mod diffcore;
pub mod geom;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rigidfit;
pub mod scenegen;
pub mod trainer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geom(#[from] geom::GeomError),
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in layer {layer} at point {point}")]
    NonFiniteActivation { layer: usize, point: usize },
    #[error("non-finite loss at epoch {epoch}, scene {scene}: seg={seg} motion={motion}")]
    NonFiniteLoss {
        epoch: usize,
        scene: String,
        seg: f64,
        motion: f64,
    },
    #[error("scene {0} has no noisy flow channel")]
    MissingFlow(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("scene document {path}: {message}")]
    SceneFormat { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
