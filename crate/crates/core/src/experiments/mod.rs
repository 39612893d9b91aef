//! Synthetic tasks, the downstream training loop and the studies built on
//! it: layer sweeps, the L-adapter ablation, learning-rate grids and
//! layer-weight reports.

mod studies;
pub mod tasks;
mod train;

#[cfg(test)]
mod tests;

pub use studies::{
    ablate_l_config, format_ablation, layer_weight_report, lr_grid_search, mean_std, run_many, sweep_grid, sweep_layers,
    weights_svg, write_csv, write_csv_file, write_weight_report, AblationRow, GridCell, GridReport, SweepRow, WeightReport,
    WeightRow,
};
pub use tasks::{content_frames, generate_task, pretraining_corpus, Example, SyntheticTaskSpec, TaskData, TaskKind, World};
pub use train::{
    evaluate, pretrain, train, train_model, train_on, weight_centroid, PretrainConfig, Preset, Pretrained, RunConfig,
    RunReport, TrainedRun, LR_GRID,
};
