//! Run orchestration: `prepare`, `train`, `evaluate`, `explain` and `report`
//! over per-run directories described by a [`RunManifest`].

mod commands;
mod manifest;
mod report;

pub use commands::*;
pub use manifest::{Artifacts, DatasetSource, RunManifest, Seeds, SplitRef, MANIFEST_FILE, SPLIT_FILE};
pub use report::{build_report, ReportRow, ReportTable, COLUMNS};

use crate::error::ErrorKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;
/// Explanations were written but at least one missed the additivity tolerance.
pub const EXIT_RESIDUAL: i32 = 8;

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
        ErrorKind::Io => EXIT_IO,
    }
}
