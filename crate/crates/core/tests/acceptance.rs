//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! Criteria 6 and 7 read real MNIST / CIFAR-10 files from
//! `SPARSELAB_MNIST_DIR` / `SPARSELAB_CIFAR_DIR` when set. Otherwise they
//! generate format-identical stand-in files with synthetic images, so the
//! whole pipeline (parsing included) still runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sparselab::harness::{
    compare_strategies, read_series, run_experiment, run_grid, write_cifar_standin, write_mnist_standin, DataSpec,
    GridSpec, ModelSpec, TrainConfig, SUMMARY_FILE,
};
use sparselab::models::{Mlp, MlpConfig, Network, Vit, VitConfig};
use sparselab::numeric::{finite_diff_grad, relative_error, Matrix, RngState, DEFAULT_STEP};
use sparselab::pruning::{
    keep_count, prune_to_sparsity, read_mask_artifact, Magnitude, Mask, PruneGroup, SparsitySchedule, StrategyKind,
};
use sparselab::sparse_coding::{run_energy_checks, OracleConfig};
use sparselab::token_merge::{single_pass_merge, TokenBatch};

struct Outcome {
    passed: bool,
    detail: String,
}

fn run(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Result<Outcome, String>) -> bool {
    let start = Instant::now();
    let outcome = f().unwrap_or_else(|e| Outcome {
        passed: false,
        detail: format!("error: {e}"),
    });
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let passed = outcome.passed && in_time;
    println!(
        "{} [{id}] {name}: {} ({:.1} s, limit {} s{})",
        if passed { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", over time" }
    );
    passed
}

fn energy_identity() -> Result<Outcome, String> {
    let report = run_energy_checks(&OracleConfig {
        seed: 0,
        identity_instances: 200,
        gradient_instances: 0,
    })
    .map_err(|e| e.to_string())?;
    let line = report.line("staged-identity").ok_or("missing identity line")?;
    Ok(Outcome {
        passed: line.passed,
        detail: format!("200 instances, max rel err {:.2e} (tol 1e-10)", line.max_error),
    })
}

fn gradient_oracles() -> Result<Outcome, String> {
    let report = run_energy_checks(&OracleConfig {
        seed: 1,
        identity_instances: 0,
        gradient_instances: 8,
    })
    .map_err(|e| e.to_string())?;
    let names = [
        "grad-coeff",
        "grad-basis",
        "staged-grad-survivor",
        "staged-grad-reactivated",
        "staged-grad-basis",
    ];
    let mut parts = Vec::new();
    let mut passed = true;
    for n in names {
        let l = report.line(n).ok_or(format!("missing {n}"))?;
        passed &= l.passed;
        parts.push(format!("{n} {:.1e}", l.max_error));
    }
    if !passed {
        print!("{report}");
    }
    Ok(Outcome {
        passed,
        detail: format!("{} (tol 1e-6)", parts.join(", ")),
    })
}

fn schedule_and_mask() -> Result<Outcome, String> {
    let e = |x: sparselab::Error| x.to_string();
    let schedule = SparsitySchedule::new(0.9, 1000, 100).map_err(e)?;
    let endpoints = schedule.target_sparsity(0).map_err(e)? == 0.0 && schedule.target_sparsity(1000).map_err(e)? == 0.9;

    let mut rng = RngState::new(3);
    let mut group = PruneGroup::new();
    group.push("a", Mask::dense(20, 30)).map_err(e)?;
    group.push("b", Mask::dense(40, 10)).map_err(e)?;
    let n = group.len();
    let mut exact = true;
    let mut updates = 0;
    for t in schedule.update_steps() {
        let a = Matrix::from_fn(20, 30, |_, _| rng.gaussian());
        let b = Matrix::from_fn(40, 10, |_, _| rng.gaussian());
        let target = schedule.target_sparsity(t).map_err(e)?;
        let kept = prune_to_sparsity(&mut group, &[&a, &b], &Magnitude, target).map_err(e)?;
        exact &= kept == keep_count(n, target) && group.sparsity() == 1.0 - kept as f64 / n as f64;
        updates += 1;
    }

    // Two updates at 40%: the third survivor shrinks below a pruned weight,
    // which then comes back.
    let mut g = PruneGroup::new();
    g.push("w", Mask::dense(1, 5)).map_err(e)?;
    let w1 = Matrix::row_vector(vec![5.0, 4.0, 3.0, 2.0, 1.0]);
    prune_to_sparsity(&mut g, &[&w1], &Magnitude, 0.4).map_err(e)?;
    let first = g.flat_bits();
    let w2 = Matrix::row_vector(vec![5.0, 4.0, 0.5, 2.0, 1.0]);
    prune_to_sparsity(&mut g, &[&w2], &Magnitude, 0.4).map_err(e)?;
    let second = g.flat_bits();
    let reactivated = first == [true, true, true, false, false] && second == [true, true, false, true, false];

    Ok(Outcome {
        passed: endpoints && exact && reactivated,
        detail: format!(
            "endpoints exact: {endpoints}; realized = 1 - k/n at all {updates} updates: {exact}; reactivation: {reactivated}"
        ),
    })
}

fn token_conservation() -> Result<Outcome, String> {
    let mut rng = RngState::new(4);
    let mut worst = 0f64;
    let mut lengths_ok = true;
    let mut identity_ok = true;
    for _ in 0..1000 {
        let n = 2 + rng.below(40);
        let d = 1 + rng.below(12);
        let tokens = Matrix::from_fn(n, d, |_, _| rng.gaussian() * 3.0);
        let sizes: Vec<usize> = (0..n).map(|_| 1 + rng.below(4)).collect();
        let protected: Vec<bool> = (0..n).map(|i| i == 0 && rng.uniform() < 0.5).collect();
        let batch = TokenBatch::from_parts(tokens, sizes, protected).map_err(|e| e.to_string())?;
        let ratio = rng.uniform() * 0.95;
        let out = single_pass_merge(&batch, ratio).map_err(|e| e.to_string())?;
        let before = batch.weighted_sum();
        let after = out.weighted_sum();
        let scale = before.iter().fold(1f64, |m, v| m.max(v.abs()));
        for (a, b) in before.iter().zip(&after) {
            worst = worst.max((a - b).abs() / scale);
        }
        let m = sparselab::token_merge::merge_count_for_ratio(batch.unprotected_count(), ratio)
            .min(batch.unprotected_count().div_ceil(2));
        lengths_ok &= out.len() == n - m && out.total_size() == batch.total_size();
        let same = single_pass_merge(&batch, 0.0).map_err(|e| e.to_string())?;
        identity_ok &= same.sizes == batch.sizes
            && same.protected == batch.protected
            && same
                .tokens
                .as_slice()
                .iter()
                .zip(batch.tokens.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    Ok(Outcome {
        passed: worst <= 1e-12 && lengths_ok && identity_ok,
        detail: format!(
            "1000 batches, max rel drift {worst:.2e} (tol 1e-12); length n - m: {lengths_ok}; ratio 0 bit-identical: {identity_ok}"
        ),
    })
}

fn model_gradients() -> Result<Outcome, String> {
    let e = |x: sparselab::Error| x.to_string();
    let mut rng = RngState::new(5);
    let mlp = Mlp::new(
        MlpConfig {
            input_dim: 16,
            hidden: vec![8, 6],
            classes: 4,
        },
        &mut rng,
    )
    .map_err(e)?;
    let x = Matrix::from_fn(2, 16, |_, _| rng.gaussian());
    let pass = mlp.forward_backward(&x, &[1, 3]).map_err(e)?;
    let mut mlp_err = 0f64;
    for (pi, p) in mlp.params().iter().enumerate() {
        let fd = finite_diff_grad(
            |v| {
                let mut m = mlp.clone();
                m.params_mut()[pi].value = v.clone();
                m.forward_backward(&x, &[1, 3]).map_or(f64::NAN, |p| p.loss)
            },
            &p.value,
            DEFAULT_STEP,
        )
        .map_err(e)?;
        mlp_err = mlp_err.max(relative_error(pass.grads[pi].as_slice(), fd.as_slice(), 1e-10));
    }

    let vit = Vit::new(VitConfig::tiny(), &mut rng).map_err(e)?;
    let x = Matrix::from_fn(2, vit.config().input_dim(), |_, _| rng.gaussian());
    let pass = vit.forward_backward(&x, &[0, 2]).map_err(e)?;
    let mut vit_err = 0f64;
    for (pi, p) in vit.params().iter().enumerate() {
        let fd = finite_diff_grad(
            |v| {
                let mut m = vit.clone();
                m.params_mut()[pi].value = v.clone();
                m.forward_backward(&x, &[0, 2]).map_or(f64::NAN, |p| p.loss)
            },
            &p.value,
            DEFAULT_STEP,
        )
        .map_err(e)?;
        vit_err = vit_err.max(relative_error(pass.grads[pi].as_slice(), fd.as_slice(), 1e-10));
    }
    Ok(Outcome {
        passed: mlp_err <= 1e-4 && vit_err <= 1e-4,
        detail: format!("MLP max rel err {mlp_err:.2e}, ViT max rel err {vit_err:.2e} (tol 1e-4)"),
    })
}

fn data_dir(var: &str, scratch: &Path, make: impl FnOnce(&Path) -> sparselab::Result<()>) -> Result<(PathBuf, bool), String> {
    if let Ok(dir) = std::env::var(var) {
        return Ok((PathBuf::from(dir), true));
    }
    make(scratch).map_err(|e| e.to_string())?;
    Ok((scratch.to_path_buf(), false))
}

fn mlp_config(data: PathBuf, out: PathBuf, max_train: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelSpec::Mlp(MlpConfig::default()),
        strategy: StrategyKind::IterativePruning,
        sparsity: 0.9,
        epochs,
        update_interval: 100,
        merge_ratio: 0.0,
        learning_rate: 1e-3,
        batch_size: 32,
        seed: 7,
        data: DataSpec::Mnist {
            dir: data,
            native_28: false,
            max_train: Some(max_train),
            max_test: Some(2000),
        },
        output_dir: out,
        window: 100,
    }
}

fn three_strategies(scratch: &Path) -> Result<Outcome, String> {
    let (mnist, real) = data_dir("SPARSELAB_MNIST_DIR", &scratch.join("mnist"), |d| {
        write_mnist_standin(d, 11, 10_000, 2_000)
    })?;
    let out = scratch.join("strategies");
    let cmp = compare_strategies(&mlp_config(mnist, out.clone(), 10_000, 5)).map_err(|e| e.to_string())?;

    let it_mask = read_mask_artifact(&cmp.iterative.mask_path).map_err(|e| e.to_string())?;
    let opt_mask = read_mask_artifact(&cmp.optimal.mask_path).map_err(|e| e.to_string())?;
    let chain = it_mask.flat_bits() == opt_mask.flat_bits() && cmp.optimal.log.mask_updates.len() == 1;
    let mut curves = true;
    for s in ["iterative", "optimal", "random"] {
        let pts = read_series(out.join(s).join("grad_window.csv")).map_err(|e| e.to_string())?;
        curves &= !pts.is_empty();
    }
    let acc = |r: &sparselab::harness::RunOutput| r.final_test_accuracy;
    Ok(Outcome {
        passed: chain && curves,
        detail: format!(
            "{} data; artifact chain: {chain}; curves exported: {curves}; ordering iterative < optimal < random in {}/{} windows ({:.2}); test acc {:.3}/{:.3}/{:.3}",
            if real { "MNIST" } else { "stand-in" },
            cmp.ordered,
            cmp.windows,
            cmp.ordering_fraction(),
            acc(&cmp.iterative),
            acc(&cmp.optimal),
            acc(&cmp.random)
        ),
    })
}

fn vit_config(data: PathBuf, out: PathBuf, max_train: usize, max_test: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelSpec::Vit(VitConfig::smoke()),
        strategy: StrategyKind::IterativePruning,
        sparsity: 0.9,
        epochs,
        update_interval: 10,
        merge_ratio: 0.0,
        learning_rate: 2.5e-3,
        batch_size: 32,
        seed: 7,
        data: DataSpec::Cifar10 {
            dir: data,
            max_train: Some(max_train),
            max_test: Some(max_test),
        },
        output_dir: out,
        window: 100,
    }
}

fn smoke_grid(scratch: &Path) -> Result<Outcome, String> {
    let (cifar, real) = data_dir("SPARSELAB_CIFAR_DIR", &scratch.join("cifar"), |d| {
        write_cifar_standin(d, 12, 2_000, 500)
    })?;
    let out = scratch.join("grid");
    let grid = GridSpec {
        sparsities: vec![0.9, 0.95],
        merges: vec![0.0, 0.4],
        learning_rates: vec![2.5e-3],
    };
    let cells = run_grid(&vit_config(cifar, out.clone(), 2_000, 500, 2), &grid).map_err(|e| e.to_string())?;
    let summary = fs::read_to_string(out.join(SUMMARY_FILE)).map_err(|e| e.to_string())?;
    let summary_ok = summary.lines().count() == cells.len() + 1;
    let monotone = cells.iter().all(|c| c.monotone_sparsity);
    let finite = cells.iter().all(|c| c.finite_losses);
    let baseline: Vec<f64> = cells.iter().filter(|c| c.merge == 0.0).map(|c| c.test_accuracy).collect();
    let above_floor = baseline.iter().all(|&a| a > 0.10);
    let accs: Vec<String> = cells
        .iter()
        .map(|c| format!("r{}/m{}={:.3}", c.sparsity, c.merge, c.test_accuracy))
        .collect();
    Ok(Outcome {
        passed: summary_ok && monotone && finite && above_floor && cells.len() == 4,
        detail: format!(
            "{} data; {} cells; summary csv: {summary_ok}; monotone sparsity: {monotone}; finite losses: {finite}; baseline > 10%: {above_floor}; acc {}",
            if real { "CIFAR-10" } else { "stand-in" },
            cells.len(),
            accs.join(" ")
        ),
    })
}

fn csv_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.push((name, fs::read(&path).map_err(|e| e.to_string())?));
        }
    }
    out.sort();
    Ok(out)
}

fn determinism(scratch: &Path) -> Result<Outcome, String> {
    let mnist = scratch.join("det-mnist");
    write_mnist_standin(&mnist, 13, 1_500, 300).map_err(|e| e.to_string())?;
    let cifar = scratch.join("det-cifar");
    write_cifar_standin(&cifar, 14, 300, 100).map_err(|e| e.to_string())?;

    let configs = [
        mlp_config(mnist.clone(), PathBuf::new(), 1_500, 1),
        TrainConfig {
            strategy: StrategyKind::RandomSubnetwork,
            ..mlp_config(mnist, PathBuf::new(), 1_500, 1)
        },
        TrainConfig {
            merge_ratio: 0.4,
            ..vit_config(cifar, PathBuf::new(), 300, 100, 1)
        },
    ];
    let mut files = 0;
    let mut identical = true;
    for (i, c) in configs.iter().enumerate() {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let dir = scratch.join(format!("det-{i}-{rep}"));
            run_experiment(&TrainConfig {
                output_dir: dir.clone(),
                ..c.clone()
            })
            .map_err(|e| e.to_string())?;
            runs.push(csv_bytes(&dir)?);
        }
        files += runs[0].len();
        identical &= !runs[0].is_empty() && runs[0] == runs[1];
    }
    Ok(Outcome {
        passed: identical,
        detail: format!("3 configurations run twice, {files} CSV files per rerun compared, byte-identical: {identical}"),
    })
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let s = scratch.path();
    let results = [
        run(1, "staged energy identity", Duration::from_secs(5), energy_identity),
        run(2, "energy gradient oracles", Duration::from_secs(10), gradient_oracles),
        run(3, "schedule and mask exactness", Duration::from_secs(1), schedule_and_mask),
        run(4, "token-merge conservation", Duration::from_secs(5), token_conservation),
        run(5, "model gradient checks", Duration::from_secs(60), model_gradients),
        run(6, "three-strategy gradient curves", Duration::from_secs(15 * 60), || three_strategies(s)),
        run(7, "ViT merge x sparsity smoke grid", Duration::from_secs(30 * 60), || smoke_grid(s)),
        run(8, "rerun determinism", Duration::from_secs(10 * 60), || determinism(s)),
    ];
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
