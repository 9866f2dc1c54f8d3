//! Configuration, run directories, checkpoints, metric tables and plots.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod plot;
pub mod rundir;

pub use checkpoint::{read_params, write_params};
pub use config::{load_config, parse_config, ConfigError, RunConfig};
pub use metrics::{read_table, MetricsWriter, Table};
pub use plot::{line_chart_svg, PlotLayout};
pub use rundir::RunDir;
