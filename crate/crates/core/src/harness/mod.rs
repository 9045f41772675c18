//! Datasets, training runs and metric recording.
//!
//! A run trains one model under one pruning strategy and writes its metric
//! series, a checkpoint and the final mask into its output directory. The
//! grid and comparison drivers are thin loops over [`run_experiment`].

mod compare;
mod data;
mod export;
mod grid;
mod metrics;
mod train;

pub use compare::{compare_strategies, StrategyComparison, COMPARISON_FILE};
pub use data::{
    bilinear_resize, load_cifar10, load_mnist, read_idx_images, read_idx_labels, synth_dataset,
    write_cifar_batch, write_cifar_standin, write_idx_images, write_idx_labels, write_mnist_standin,
    CifarOptions, Dataset, Split, SynthSpec, CIFAR_MEAN, CIFAR_STD, CIFAR_TEST_BATCH,
    CIFAR_TRAIN_BATCHES, MNIST_TEST_IMAGES, MNIST_TEST_LABELS, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS,
};
pub use export::{
    export_metrics, export_stage_log, read_manifest, read_series, write_series, ExportManifest, SeriesFile,
    MANIFEST_FILE,
};
pub use grid::{run_grid, write_summary, GridCell, GridSpec, SUMMARY_FILE};
pub use metrics::{unmasked_means, EpochRecord, MaskUpdate, MetricsLog, WindowMean, DEFAULT_WINDOW};
pub use train::{
    evaluate, load_data, run_experiment, train_on, with_output, DataSpec, ModelSpec, RunOutput, TrainConfig,
    CHECKPOINT_DIR, FINAL_MASK_FILE,
};
