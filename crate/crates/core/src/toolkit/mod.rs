//! Everything around the numeric core: configuration, genotype files,
//! retraining, CSV outputs and the command-line front end.

mod cli;
mod config;
mod eval;
mod fs;
mod genotype_io;
mod records;

pub use cli::{cli_dispatch, run, Cli, Command, Manifest, MANIFEST_VERSION};
pub use config::{DataKind, EvalConfig, RunConfig};
pub use eval::{evaluate, EvalReport};
pub use fs::write_atomic;
pub use genotype_io::{genotype_from_json, genotype_to_json, load_genotype, save_genotype, GENOTYPE_FORMAT_VERSION};
pub use records::{
    metrics_csv, parse_trajectory_csv, plot_csv, trajectory_csv, MetricRecord, Phase, METRICS_HEADER, PLOT_HEADER,
    TRAJECTORY_HEADER,
};
