// SPDX-License-Identifier: Apache-2.0

use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("i/o error: {0}")]
    RawIo(#[from] io::Error),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("line-count mismatch: {src_lines} source lines vs {tgt_lines} target lines")]
    LineCountMismatch { src_lines: usize, tgt_lines: usize },

    #[error("empty line {line} in {side} file")]
    EmptyLine { side: &'static str, line: usize },

    #[error("alignment line {line}: malformed token {token:?} (expected \"i-j\")")]
    MalformedAlignment { line: usize, token: String },

    #[error("alignment line {line}: pair {src}-{tgt} out of range for lengths {src_len}x{tgt_len}")]
    AlignmentOutOfRange {
        line: usize,
        src: usize,
        tgt: usize,
        src_len: usize,
        tgt_len: usize,
    },

    #[error("alignment file has {found} lines, corpus has {expected} pairs")]
    AlignmentLineCount { expected: usize, found: usize },

    #[error("bad header in {what}: {detail}")]
    BadHeader { what: &'static str, detail: String },

    #[error("row count mismatch: expected {expected}, found {found}")]
    RowCountMismatch { expected: usize, found: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty datastore")]
    EmptyDatastore,

    #[error("empty source sentence")]
    EmptySource,

    #[error("empty reference set")]
    EmptyReference,

    #[error("missing manifest in {0}")]
    MissingManifest(PathBuf),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
