//! Experiment driver: configs, training runs, sweeps, reports and
//! figure-ready landscape and spectrum files.

mod config;
mod emit;
mod report;
mod sweep;
mod train;

pub use config::{
    canonical_json, default_output_root, fingerprint, parse_kv, to_kv, DatasetConfig, DatasetKind,
    ExperimentConfig, ModelConfig, SweepGrid, OUTPUT_ROOT_ENV,
};
pub use emit::{
    emit_landscape, emit_spectrum, heatmap_svg, landscape_summary, spectrum_of, LandscapeFiles,
    LandscapeParams, LandscapeSummary, SpectrumOutput,
};
pub use report::{aggregate, load_summaries, write_report, Report, ReportRow, Stats};
pub use sweep::{cell_config, grid_cells, sweep, sweep_csv, Cell, CellResult, SweepResult};
pub use train::{
    evaluate, load_bundle, metrics_csv, model_spec_for, run_experiment, seed_dir, train_on,
    train_seed, Checkpoint, EpochMetrics, ExperimentOutput, ExperimentSummary, RunRecord,
    SeedResult, SeedSummary, TestBedMetrics,
};
