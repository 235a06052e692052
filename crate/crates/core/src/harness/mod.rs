//! Experiment harness: configuration, single runs, ablation sweeps and
//! file output.

pub mod config;
pub mod io;
pub mod prox_table;
pub mod run;
pub mod sweep;

pub use config::{RunConfig, CANONICAL_TOML};
pub use io::{latent_pgm, parse_pgm, OutputBundle, Table};
pub use run::{execute, run, Command, MetricsRow, RunOutput, VERSION};
pub use sweep::{ablate_masactrl, ablate_recon, ablate_threshold, SweepOutput};
