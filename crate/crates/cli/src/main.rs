//! `sparselab` command-line front end.
//!
//! Exit codes: 0 on full success, 1 on any runtime failure (one-line reason on
//! stderr), 2 on a usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparselab::harness::{compare_strategies, run_experiment, run_grid, GridSpec, ModelSpec, TrainConfig};
use sparselab::models::VitConfig;
use sparselab::numeric::{Matrix, RngState};
use sparselab::plot::{render_svg, PlotSpec, SeriesSpec};
use sparselab::pruning::StrategyKind;
use sparselab::sparse_coding::{run_energy_checks, OracleConfig};
use sparselab::token_merge::{single_pass_merge, TokenBatch};
use sparselab::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "sparselab", version, about = "Pruning during training, token merging and sparse-coding checks")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration.
    Train(TrainArgs),
    /// Sweep sparsity × merge × learning rate from a base configuration.
    Grid(GridArgs),
    /// Check the energy decomposition and its gradients against finite differences.
    EnergyCheck(EnergyArgs),
    /// Merge a random token set once and print before/after statistics.
    MergeDemo(MergeArgs),
    /// Render `step,value` CSV series to an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    Iterative,
    Optimal,
    Random,
}

/// Flags shared by `train` and `grid`; each one overrides the config file.
#[derive(Args, Debug)]
struct Overrides {
    /// JSON training configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Switch a ViT model to 224×224 inputs with 16-pixel patches.
    #[arg(long)]
    paper_geometry: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
    /// Final sparsity.
    #[arg(long)]
    sparsity: Option<f64>,
    /// Token merge ratio (ViT only).
    #[arg(long)]
    merge: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    /// Mask artifact for `--strategy optimal`.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Run iterative, optimal and random from the same seed and report the
    /// gradient ordering per window.
    #[arg(long, conflicts_with_all = ["strategy", "mask"])]
    compare: bool,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    common: Overrides,
    /// Comma-separated sparsities; defaults to the full sweep.
    #[arg(long, value_delimiter = ',')]
    sparsity: Vec<f64>,
    /// Comma-separated merge ratios; defaults to the full sweep.
    #[arg(long, value_delimiter = ',')]
    merge: Vec<f64>,
    /// Comma-separated learning rates; defaults to the full sweep.
    #[arg(long, value_delimiter = ',')]
    lr: Vec<f64>,
}

#[derive(Args, Debug)]
struct EnergyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances for the decomposition identity.
    #[arg(long, default_value_t = 200)]
    instances: usize,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.4)]
    merge: f64,
    /// Patch tokens, excluding the class token.
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// JSON plot specification; replaces the other plot flags.
    #[arg(long, conflicts_with_all = ["series", "title", "x_label", "y_label", "out"])]
    spec: Option<PathBuf>,
    /// Series as `label=path.csv`.
    series: Vec<String>,
    #[arg(long, default_value = "")]
    title: String,
    #[arg(long, default_value = "step")]
    x_label: String,
    #[arg(long, default_value = "value")]
    y_label: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let reason = e.to_string().replace('\n', "; ");
            eprintln!("error: {reason}");
            ExitCode::from(1)
        }
    }
}

/// `Ok(false)` means the command ran but a check failed.
fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Train(a) => train(a),
        Command::Grid(a) => grid(a),
        Command::EnergyCheck(a) => energy_check(a),
        Command::MergeDemo(a) => merge_demo(a),
        Command::Plot(a) => plot(a),
    }
}

fn load_config(o: &Overrides) -> Result<TrainConfig> {
    let text = fs::read_to_string(&o.config).map_err(|e| Error::io(&o.config, e))?;
    let mut config: TrainConfig =
        serde_json::from_str(&text).map_err(|e| Error::format(&o.config, e.to_string()))?;
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(epochs) = o.epochs {
        config.epochs = epochs;
    }
    if let Some(out) = &o.out {
        config.output_dir = out.clone();
    }
    if o.paper_geometry {
        let ModelSpec::Vit(v) = &mut config.model else {
            return Err(Error::InvalidArgument("--paper-geometry needs a ViT model".into()));
        };
        let full = VitConfig::full_geometry();
        v.image_size = full.image_size;
        v.patch_size = full.patch_size;
    }
    Ok(config)
}

fn train(a: TrainArgs) -> Result<bool> {
    let mut config = load_config(&a.common)?;
    if let Some(s) = a.sparsity {
        config.sparsity = s;
    }
    if let Some(m) = a.merge {
        config.merge_ratio = m;
    }
    if let Some(lr) = a.lr {
        config.learning_rate = lr;
    }
    match (a.strategy, a.mask) {
        (Some(Strategy::Iterative), None) => config.strategy = StrategyKind::IterativePruning,
        (Some(Strategy::Random), None) => config.strategy = StrategyKind::RandomSubnetwork,
        (Some(Strategy::Optimal), Some(mask_path)) => config.strategy = StrategyKind::OptimalSubnetwork { mask_path },
        (Some(Strategy::Optimal), None) => {
            if !matches!(config.strategy, StrategyKind::OptimalSubnetwork { .. }) {
                return Err(Error::InvalidArgument("--strategy optimal needs --mask".into()));
            }
        }
        (None, Some(mask_path)) if matches!(config.strategy, StrategyKind::OptimalSubnetwork { .. }) => {
            config.strategy = StrategyKind::OptimalSubnetwork { mask_path }
        }
        (_, Some(_)) => return Err(Error::InvalidArgument("--mask only applies to the optimal strategy".into())),
        (None, None) => {}
    }

    if a.compare {
        let c = compare_strategies(&config)?;
        for run in [&c.iterative, &c.optimal, &c.random] {
            println!(
                "{}: sparsity {:.4} test accuracy {:.4} -> {}",
                run.output_dir.file_name().unwrap_or_default().to_string_lossy(),
                run.final_sparsity,
                run.final_test_accuracy,
                run.output_dir.display()
            );
        }
        println!(
            "iterative < optimal < random in {}/{} windows ({:.3})",
            c.ordered,
            c.windows,
            c.ordering_fraction()
        );
        return Ok(true);
    }

    let out = run_experiment(&config)?;
    println!(
        "{} steps, final sparsity {:.4}, final loss {:.6}, test accuracy {:.4}",
        out.steps, out.final_sparsity, out.final_loss, out.final_test_accuracy
    );
    println!("outputs in {}", out.output_dir.display());
    Ok(true)
}

fn grid(a: GridArgs) -> Result<bool> {
    let base = load_config(&a.common)?;
    let full = GridSpec::full_sweep();
    let pick = |given: Vec<f64>, default: Vec<f64>| if given.is_empty() { default } else { given };
    let spec = GridSpec {
        sparsities: pick(a.sparsity, full.sparsities),
        merges: pick(a.merge, full.merges),
        learning_rates: pick(a.lr, full.learning_rates),
    };
    let cells = run_grid(&base, &spec)?;
    println!("sparsity  merge  lr        accuracy  realized");
    let mut healthy = true;
    for c in &cells {
        println!(
            "{:<9} {:<6} {:<9} {:<9.4} {:.4}",
            c.sparsity, c.merge, c.learning_rate, c.test_accuracy, c.realized_sparsity
        );
        healthy &= c.finite_losses && c.monotone_sparsity;
    }
    println!("summary in {}", base.output_dir.join(sparselab::harness::SUMMARY_FILE).display());
    if !healthy {
        eprintln!("error: a cell had a non-finite loss or a decreasing sparsity schedule");
    }
    Ok(healthy)
}

fn energy_check(a: EnergyArgs) -> Result<bool> {
    let report = run_energy_checks(&OracleConfig {
        seed: a.seed,
        identity_instances: a.instances,
        ..OracleConfig::default()
    })?;
    print!("{report}");
    Ok(report.all_passed())
}

fn merge_demo(a: MergeArgs) -> Result<bool> {
    if a.dim == 0 {
        return Err(Error::InvalidArgument("--dim must be positive".into()));
    }
    let mut rng = RngState::new(a.seed);
    let n = a.tokens + 1;
    let values = (0..n * a.dim).map(|_| rng.gaussian()).collect();
    let before = TokenBatch::with_class_token(Matrix::new(n, a.dim, values)?);
    let after = single_pass_merge(&before, a.merge)?;

    let drift = before
        .weighted_sum()
        .iter()
        .zip(after.weighted_sum())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let largest = after.sizes.iter().max().copied().unwrap_or(0);
    let merged = after.sizes.iter().filter(|&&s| s > 1).count();
    println!("tokens       {} -> {}", before.len(), after.len());
    println!("total size   {} -> {}", before.total_size(), after.total_size());
    println!("merged sets  {merged} (largest holds {largest})");
    println!("class token  kept at index 0: {}", after.protected.first() == Some(&true));
    println!("size-weighted sum drift {drift:.3e}");
    Ok(true)
}

fn parse_series(raw: &[String]) -> Result<Vec<SeriesSpec>> {
    raw.iter()
        .enumerate()
        .map(|(i, s)| {
            let (label, path) = s.split_once('=').unwrap_or((s.as_str(), s.as_str()));
            let label = if label == path {
                Path::new(path).file_stem().unwrap_or_default().to_string_lossy().into_owned()
            } else {
                label.to_string()
            };
            Ok(SeriesSpec {
                label,
                csv: PathBuf::from(path),
                color: i,
            })
        })
        .collect()
}

fn plot(a: PlotArgs) -> Result<bool> {
    let spec = match a.spec {
        Some(path) => {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str::<PlotSpec>(&text).map_err(|e| Error::format(&path, e.to_string()))?
        }
        None => PlotSpec {
            title: a.title,
            x_label: a.x_label,
            y_label: a.y_label,
            series: parse_series(&a.series)?,
            output: a
                .out
                .ok_or_else(|| Error::InvalidArgument("plot needs --out or --spec".into()))?,
        },
    };
    render_svg(&spec)?;
    println!("wrote {}", spec.output.display());
    Ok(true)
}
