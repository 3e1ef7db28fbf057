//! File formats, CSV ingestion, external baseline adapters and the
//! command-line interface around `recontab-core`.

pub mod adapter;
pub mod cli;
pub mod formats;
pub mod io;
