use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::{load_data, run_experiment, train_on, with_output, ModelSpec, RunOutput, TrainConfig};
use crate::error::{Error, Result};

/// Merge × sparsity × learning-rate sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub sparsities: Vec<f64>,
    pub merges: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

impl GridSpec {
    /// The full sparsity × merge × learning-rate sweep.
    pub fn full_sweep() -> Self {
        Self {
            sparsities: vec![0.75, 0.8, 0.85, 0.9, 0.95],
            merges: vec![0.2, 0.4, 0.6, 0.8],
            learning_rates: vec![1.25e-3, 2.5e-3, 5e-3, 1e-2],
        }
    }

    pub fn cell_count(&self) -> usize {
        self.sparsities.len() * self.merges.len() * self.learning_rates.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub sparsity: f64,
    pub merge: f64,
    pub learning_rate: f64,
    pub dir: PathBuf,
    pub test_accuracy: f64,
    pub realized_sparsity: f64,
    pub final_loss: f64,
    /// Realized sparsity never decreased across mask updates.
    pub monotone_sparsity: bool,
    /// Every recorded step loss is finite.
    pub finite_losses: bool,
}

pub const SUMMARY_FILE: &str = "summary.csv";

fn cell_name(s: f64, m: f64, lr: f64) -> String {
    format!("s{s}_m{m}_lr{lr}")
}

fn summarize(s: f64, m: f64, lr: f64, out: &RunOutput) -> GridCell {
    let realized: Vec<f64> = out.log.mask_updates.iter().map(|u| u.realized).collect();
    GridCell {
        sparsity: s,
        merge: m,
        learning_rate: lr,
        dir: out.output_dir.clone(),
        test_accuracy: out.final_test_accuracy,
        realized_sparsity: out.final_sparsity,
        final_loss: out.final_loss,
        monotone_sparsity: realized.windows(2).all(|w| w[1] >= w[0]),
        finite_losses: out.log.step_loss.iter().all(|l| l.is_finite()),
    }
}

/// Runs every cell under `base.output_dir` and writes `summary.csv` there.
///
/// Data is loaded once and shared by all cells.
pub fn run_grid(base: &TrainConfig, grid: &GridSpec) -> Result<Vec<GridCell>> {
    if grid.cell_count() == 0 {
        return Err(Error::InvalidArgument("grid has no cells".into()));
    }
    if grid.merges.iter().any(|&m| m != 0.0) && !matches!(base.model, ModelSpec::Vit(_)) {
        return Err(Error::InvalidArgument("merge ratios need a ViT model".into()));
    }
    base.validate()?;
    let root = &base.output_dir;
    let shared = load_data(base)?;
    let mut cells = Vec::with_capacity(grid.cell_count());
    for &lr in &grid.learning_rates {
        for &s in &grid.sparsities {
            for &m in &grid.merges {
                let config = TrainConfig {
                    sparsity: s,
                    merge_ratio: m,
                    learning_rate: lr,
                    ..with_output(base, root.join(cell_name(s, m, lr)))
                };
                let out = if config.data == base.data {
                    train_on(&config, &shared.0, &shared.1)?
                } else {
                    run_experiment(&config)?
                };
                cells.push(summarize(s, m, lr, &out));
            }
        }
    }
    write_summary(root.join(SUMMARY_FILE), &cells)?;
    Ok(cells)
}

pub fn write_summary(path: impl AsRef<Path>, cells: &[GridCell]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let io = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    w.write_record([
        "sparsity",
        "merge",
        "learning_rate",
        "test_accuracy",
        "realized_sparsity",
        "final_loss",
        "monotone_sparsity",
        "finite_losses",
        "dir",
    ])
    .map_err(io)?;
    for c in cells {
        let dir = c.dir.file_name().map_or_else(String::new, |d| d.to_string_lossy().into_owned());
        w.write_record([
            c.sparsity.to_string(),
            c.merge.to_string(),
            c.learning_rate.to_string(),
            c.test_accuracy.to_string(),
            c.realized_sparsity.to_string(),
            c.final_loss.to_string(),
            c.monotone_sparsity.to_string(),
            c.finite_losses.to_string(),
            dir,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
