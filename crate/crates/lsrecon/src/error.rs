use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("dimension must be 2 or 3, got {0}")]
    BadDimension(usize),
    #[error("domain half-width must exceed 1, got {0}")]
    BadHalfWidth(f64),
    #[error("point ({0}, {1}, {2}) is outside the domain", .point[0], .point[1], .point[2])]
    OutOfDomain { point: [f64; 3] },
    #[error("node {0} is not a leaf")]
    NotALeaf(u32),
    #[error("children do not form a complete sibling family of leaves")]
    IncompleteFamily,
}

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error("propagation seeded from an empty set")]
    EmptySeed,
    #[error("propagation failed to terminate after {0} sweeps")]
    NonTermination(usize),
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("narrow band is empty: the zero level set left the domain")]
    EmptyBand,
    #[error("front set is empty: lost interface")]
    LostInterface,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure at run {run}, iteration {iteration}: {source}")]
    Numerical {
        run: u32,
        iteration: u32,
        source: SolverError,
    },
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code mandated for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Numerical { .. } => 3,
            PipelineError::Cloud(CloudError::Io { .. }) => 4,
            PipelineError::Cloud(_) => 2,
            PipelineError::Io { .. } => 4,
        }
    }
}
