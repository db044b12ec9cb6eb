use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("nonpositive level {value} in column '{column}' on {date} under a log transform")]
    NonPositiveLevel {
        column: String,
        date: String,
        value: f64,
    },

    #[error("non-finite value at t={t} during {stage}")]
    NonFinite { t: usize, stage: &'static str },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("malformed tree: {0}")]
    MalformedTree(String),

    #[error("artifact version mismatch: file has version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },

    #[error("json error at byte offset {offset}: {message}")]
    Json { offset: usize, message: String },

    #[error("config error in field '{field}': {message}")]
    Config { field: String, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Stable machine-readable code for CLI error reporting.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Empty(_) => "empty",
            Error::InvalidInput(_) => "invalid_input",
            Error::NonPositiveLevel { .. } => "nonpositive_level",
            Error::NonFinite { .. } => "non_finite",
            Error::Singular(_) => "singular",
            Error::Dimension { .. } => "dimension",
            Error::Diverged(_) => "diverged",
            Error::MalformedTree(_) => "malformed_tree",
            Error::Version { .. } => "version",
            Error::Json { .. } => "json",
            Error::Config { .. } => "config",
        }
    }

    /// Convert a serde_json error into a byte-offset error against `src`.
    pub fn from_json(err: serde_json::Error, src: &str) -> Self {
        let offset = byte_offset(src, err.line(), err.column());
        Error::Json {
            offset,
            message: err.to_string(),
        }
    }
}

fn byte_offset(src: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in src.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len();
    }
    src.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_offsets_count_bytes() {
        let src = "{\n  \"a\": 1,\n  \"b\": ]\n}";
        let err = serde_json::from_str::<serde_json::Value>(src).unwrap_err();
        match Error::from_json(err, src) {
            Error::Json { offset, .. } => assert_eq!(&src[offset..offset + 1], "]"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
