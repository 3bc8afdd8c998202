mod bench;
mod prepare;
mod report;
mod run;

pub use bench::{bench_csv, cmd_bench};
pub use prepare::{cmd_prepare, PrepareSummary};
pub use report::cmd_report;
pub use run::{cmd_run, load_dataset, RunOptions, RunSummary};
