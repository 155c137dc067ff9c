//! Run configuration, the end-to-end pipeline and its reports.
//!
//! A run writes `records.jsonl`: a header line (config hash, version,
//! generators), then per dataset a summary line (selected model, model and
//! factual-set hashes, factual profiles) followed by one line per
//! generation attempt with its metrics. Every factual is attempted twice
//! per generator, so a complete file holds
//! `datasets x factuals x generators x 2` record lines.

mod config;
mod report;
mod run;

pub use config::{validate_config, DatasetConfig, GeneratorConfig, RunConfig, Seeds};
pub use report::{
    coverage_rows, stability_rows, time_rows, write_report, CoverageRow, ReportOptions, StabilityRow, TimeRow,
};
pub use run::{
    mask_ct, run_benchmark, DatasetSummary, FactualSummary, GeneratorInfo, RecordLine, RunFailure, RunHeader,
    RunLine, RunOptions, RunOutcome, RunRecord, RECORDS_FILE,
};
