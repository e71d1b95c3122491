//! Experiment grids from TOML configs, their on-disk artifacts, and slice
//! rendering.

mod config;
mod grid;
mod render;

pub use config::{ExperimentConfig, GridConfig, Normalization, PhantomSource, Source, VolumeSource};
pub use grid::{
    aggregate_dir, cell_dir, fingerprint, load_source, run_grid, CellResult, GridSummary, AGGREGATE_FILE, CONFIG_FILE,
    COST_FILE, HISTORY_FILE, MARKER_FILE, RESULT_FILE,
};
pub use render::{render_slice, write_slice, PALETTE};
