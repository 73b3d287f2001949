//! Line-image ingestion: graymap I/O, preprocessing, transcript encoding,
//! manifests, batching and a synthetic line generator.

mod batch;
mod charset;
mod font;
mod manifest;
mod pgm;
mod preprocess;
mod synth;

pub use batch::{collate_batch, Batch};
pub use charset::Charset;
pub use font::{glyph, FONT_SYMBOLS, GLYPH_COLS, GLYPH_ROWS};
pub use manifest::{load_dataset, Dataset, DatasetManifest, ManifestRecord};
pub use pgm::{parse_pgm, read_pgm, write_pgm, GrayImage};
pub use preprocess::{load_and_preprocess, preprocess, resize_bilinear, standardize, LineImage, LineSample, ResizeMode};
pub use synth::{synth_dataset, synth_generate, synth_lines, write_synth_dataset, SynthSpec, CELL_WIDTH, MARGIN};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("{}: not a valid graymap: {reason}", path.display())]
    Pgm { path: PathBuf, reason: String },
    #[error("{}: image has a zero dimension ({width}x{height})", path.display())]
    EmptyImage { path: PathBuf, width: usize, height: usize },
    #[error("unknown symbol {symbol:?} at position {position}")]
    UnknownSymbol { symbol: char, position: usize },
    #[error("label index {index} outside a charset of {size} symbols")]
    UnknownIndex { index: usize, size: usize },
    #[error("charset: {0}")]
    Charset(String),
    #[error("{}:{line}: {reason}", path.display())]
    Manifest { path: PathBuf, line: usize, reason: String },
    #[error("{sample}: {frames} frames cannot carry a transcript needing {required}")]
    Infeasible { sample: String, frames: usize, required: usize },
    #[error("cannot collate an empty batch")]
    EmptyBatch,
    #[error("batch heights differ: {0:?}")]
    HeightMismatch(Vec<usize>),
    #[error("symbol {0:?} has no glyph in the synthetic font")]
    Uncovered(char),
    #[error("synthesis: {0}")]
    Synth(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Self::Io { path: path.into(), message: err.to_string() }
    }
}
