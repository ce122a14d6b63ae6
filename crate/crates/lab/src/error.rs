use std::path::PathBuf;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("line {line}: cannot parse `{text}` (expected `key = value`)")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { key: String, line: usize },
    #[error("missing required key `{key}`")]
    MissingKey { key: String },
    #[error("{}`{key}`: {msg}", line_prefix(*.line))]
    Invalid {
        key: String,
        /// 0 when the value came from a default.
        line: usize,
        msg: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: row {row}, column {col}: {msg}", path.display())]
    Format {
        path: PathBuf,
        row: usize,
        col: usize,
        msg: String,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error("run `{run_id}` seed {seed}: {source}")]
    Run {
        run_id: String,
        seed: u64,
        source: bsam_core::Error,
    },
    #[error(transparent)]
    Core(#[from] bsam_core::Error),
}

fn line_prefix(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!("line {line}: ")
    }
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, row: usize, col: usize, msg: impl Into<String>) -> Self {
        LabError::Format {
            path: path.into(),
            row,
            col,
            msg: msg.into(),
        }
    }
}
