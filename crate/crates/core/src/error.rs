use std::path::PathBuf;

use crate::sparse::SparseCode;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported or corrupt format: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("image {width}x{height} cannot fit a {patch}px patch")]
    EmptyGrid {
        width: usize,
        height: usize,
        patch: usize,
    },

    #[error("layout region {region} (level {level}, rect {rect:?}) contains no grid location")]
    EmptyRegion {
        region: usize,
        level: usize,
        rect: [f64; 4],
    },

    #[error("sparse coding did not converge after {iterations} active-set changes")]
    Convergence {
        iterations: usize,
        best: Box<SparseCode>,
    },

    #[error("all sparse codes are zero; dictionary cannot be updated")]
    DegenerateCodes,

    #[error("query vector is zero")]
    DegenerateQuery,

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, looking through stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code for the CLI: 2 validation, 3 convergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Io { .. } => 4,
            Error::Convergence { .. } => 3,
            _ => 2,
        }
    }
}
