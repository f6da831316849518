//! Batch driver: expands a manifest into (scenario, replicate, model) cells,
//! runs them on a thread pool and writes raw and summary CSVs.

mod aggregate;
mod manifest;
mod run;

pub use aggregate::{aggregate, aggregate_rows, SummaryRow, AGGREGATED_METRICS};
pub use manifest::{
    default_roster, ModelChoice, DESK_EVENT_CAP, NetworkSettings, PenaltyChoice, RosterEntry, RunManifest,
};
pub use run::{evaluate_cell, read_raw, run, CellRow, RawStore, RunOptions, RunSummary};

/// First line of every output file.
pub fn hash_header(hash: &str) -> String {
    format!("# manifest_sha256={hash}")
}

pub(crate) fn parse_hash_header(line: &str) -> Option<&str> {
    line.strip_prefix("# manifest_sha256=").map(str::trim)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const RAW_FILE: &str = "raw.csv";
