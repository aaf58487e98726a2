//! Dataset ingestion, synthetic reference data, and checkpoint persistence.

pub mod checkpoint;
pub mod elements;
pub mod extxyz;
pub mod oracle;
pub mod synthetic;

use thiserror::Error;

use crate::geometry::GeometryError;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use extxyz::{parse_extxyz, write_extxyz};
pub use oracle::{lj_energy, morse_energy, LjSpecies, LjTable, MorseParams, Oracle};
pub use synthetic::{gen_boltzmann_cluster_dataset, gen_dimer_scan_dataset, ClusterSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("species {0} has no oracle parameters")]
    UnknownSpecies(u32),
    #[error("atoms {i} and {j} overlap (distance {distance:e} Å)")]
    OverlappingAtoms { i: usize, j: usize, distance: f64 },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unsupported checkpoint format version '{0}'")]
    VersionMismatch(String),
    #[error("checkpoint digest mismatch (file truncated or corrupted)")]
    DigestMismatch,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DataError>;
