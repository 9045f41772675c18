use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{load_cifar10, load_mnist, synth_dataset, CifarOptions, Dataset, Split, SynthSpec};
use super::export::export_metrics;
use super::metrics::{unmasked_means, MaskUpdate, MetricsLog, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::models::{accuracy, save_checkpoint, Adam, Mlp, MlpConfig, Network, Vit, VitConfig};
use crate::numeric::RngState;
use crate::pruning::{
    make_strategy_mask, prune_to_sparsity, write_mask_artifact, Magnitude, SparsitySchedule, StrategyKind,
    UpdatePolicy,
};

pub const FINAL_MASK_FILE: &str = "final_mask.bin";
pub const CHECKPOINT_DIR: &str = "checkpoint";

// Independent random streams per purpose, so every strategy under one seed
// starts from the same weights and sees the same batch order.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_MASK: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Mlp(MlpConfig),
    Vit(VitConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Mnist {
        dir: PathBuf,
        /// Keep 28×28 instead of padding to 32×32.
        #[serde(default)]
        native_28: bool,
        #[serde(default)]
        max_train: Option<usize>,
        #[serde(default)]
        max_test: Option<usize>,
    },
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        max_train: Option<usize>,
        #[serde(default)]
        max_test: Option<usize>,
    },
    /// Gaussian blobs; the test split uses `seed + 1`.
    Synthetic {
        #[serde(flatten)]
        spec: SynthSpec,
        test_n: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub strategy: StrategyKind,
    /// Final sparsity r.
    pub sparsity: f64,
    pub epochs: usize,
    #[serde(default = "default_interval")]
    pub update_interval: usize,
    #[serde(default)]
    pub merge_ratio: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DataSpec,
    pub output_dir: PathBuf,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_interval() -> usize {
    SparsitySchedule::DEFAULT_UPDATE_INTERVAL
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

impl TrainConfig {
    /// Checks everything that can be checked before loading data.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidArgument(format!(
                "sparsity must be in [0, 1), got {}",
                self.sparsity
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.update_interval == 0 || self.window == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch size, update interval and window must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.merge_ratio) {
            return Err(Error::InvalidArgument(format!(
                "merge ratio must be in [0, 1), got {}",
                self.merge_ratio
            )));
        }
        match &self.model {
            ModelSpec::Mlp(c) => {
                c.validate()?;
                if self.merge_ratio != 0.0 {
                    return Err(Error::InvalidArgument("token merging needs a ViT model".into()));
                }
            }
            ModelSpec::Vit(c) => c.validate()?,
        }
        if let StrategyKind::OptimalSubnetwork { mask_path } = &self.strategy {
            if !mask_path.is_file() {
                return Err(Error::format(mask_path, "mask artifact not found"));
            }
        }
        match &self.data {
            DataSpec::Mnist { dir, .. } | DataSpec::Cifar10 { dir, .. } if !dir.is_dir() => {
                Err(Error::format(dir, "dataset directory not found"))
            }
            _ => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Loads `(train, test)` for `config`, resized to the ViT input side if needed.
pub fn load_data(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match &config.data {
        DataSpec::Mnist {
            dir,
            native_28,
            max_train,
            max_test,
        } => {
            let mut a = load_mnist(dir, Split::Train, !native_28)?;
            let mut b = load_mnist(dir, Split::Test, !native_28)?;
            if let Some(n) = max_train {
                a.truncate(*n);
            }
            if let Some(n) = max_test {
                b.truncate(*n);
            }
            (a, b)
        }
        DataSpec::Cifar10 {
            dir,
            max_train,
            max_test,
        } => (
            load_cifar10(
                dir,
                Split::Train,
                &CifarOptions {
                    max_items: *max_train,
                    ..CifarOptions::default()
                },
            )?,
            load_cifar10(
                dir,
                Split::Test,
                &CifarOptions {
                    max_items: *max_test,
                    ..CifarOptions::default()
                },
            )?,
        ),
        DataSpec::Synthetic { spec, test_n } => (
            synth_dataset(spec)?,
            synth_dataset(&SynthSpec {
                seed: spec.seed.wrapping_add(1),
                n: *test_n,
                ..spec.clone()
            })?,
        ),
    };
    if let ModelSpec::Vit(v) = &config.model {
        let (_, h, w) = train.native_shape();
        if (h, w) != (v.image_size, v.image_size) && h > 1 {
            train = train.with_resize(v.image_size)?;
            test = test.with_resize(v.image_size)?;
        }
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    Ok((train, test))
}

fn build_model(config: &TrainConfig, rng: &mut RngState) -> Result<Box<dyn Network>> {
    Ok(match &config.model {
        ModelSpec::Mlp(c) => Box::new(Mlp::new(c.clone(), rng)?),
        ModelSpec::Vit(c) => {
            let mut vit = Vit::new(c.clone(), rng)?;
            vit.set_merge_ratio(config.merge_ratio)?;
            Box::new(vit)
        }
    })
}

fn input_dim(model: &ModelSpec) -> usize {
    match model {
        ModelSpec::Mlp(c) => c.input_dim,
        ModelSpec::Vit(c) => c.input_dim(),
    }
}

/// Accuracy over the whole set in fixed-size chunks.
pub fn evaluate(model: &dyn Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        correct += accuracy(model, &x, &y)? * chunk.len() as f64;
    }
    Ok(correct / data.len() as f64)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub steps: usize,
    pub final_sparsity: f64,
    pub final_test_accuracy: f64,
    pub final_loss: f64,
    pub output_dir: PathBuf,
    pub mask_path: PathBuf,
}

/// Trains one configuration and writes metrics, a checkpoint and the final
/// mask artifact into `config.output_dir`.
pub fn run_experiment(config: &TrainConfig) -> Result<RunOutput> {
    config.validate()?;
    let (train, test) = load_data(config)?;
    train_on(config, &train, &test)
}

fn model_classes(model: &ModelSpec) -> usize {
    match model {
        ModelSpec::Mlp(c) => c.classes,
        ModelSpec::Vit(c) => c.classes,
    }
}

/// Training loop on already loaded data.
pub fn train_on(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    config.validate()?;
    if train.feature_dim() != input_dim(&config.model) {
        return Err(Error::Shape(format!(
            "dataset rows have {} features, model expects {}",
            train.feature_dim(),
            input_dim(&config.model)
        )));
    }
    if train.classes() > model_classes(&config.model) {
        return Err(Error::Shape("dataset has more classes than the model outputs".into()));
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let schedule = SparsitySchedule::new(config.sparsity, total, config.update_interval)?;

    let mut model = build_model(config, &mut RngState::derived(config.seed, STREAM_INIT))?;
    let mut shuffle_rng = RngState::derived(config.seed, STREAM_SHUFFLE);
    let mut mask_rng = RngState::derived(config.seed, STREAM_MASK);
    let (group, policy) = make_strategy_mask(&config.strategy, &model.prune_group(), config.sparsity, &mut mask_rng)?;
    model.install_masks(&group)?;
    let prunable_idx: Vec<usize> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_prunable())
        .map(|(i, _)| i)
        .collect();

    let mut log = MetricsLog::new(config.window)?;
    log.record_mask_update(MaskUpdate {
        step: 0,
        target: if policy == UpdatePolicy::Periodic { 0.0 } else { config.sparsity },
        realized: group.sparsity(),
        kept: group.count_ones(),
        reactivated: 0,
    });

    let mut adam = Adam::new(config.learning_rate)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut t = 0;
    let mut last_loss = f64::NAN;
    for _ in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = train.batch(chunk);
            let pass = model.forward_backward(&x, &y)?;
            if !pass.loss.is_finite() {
                return Err(Error::Diverged { step: t, loss: pass.loss });
            }
            {
                let params = model.params();
                let grads: Vec<_> = prunable_idx.iter().map(|&i| &pass.grads[i]).collect();
                let weights: Vec<_> = prunable_idx.iter().map(|&i| &params[i].value).collect();
                let (g, w) = unmasked_means(&grads, &weights, &model.prune_group())?;
                log.push_step(g, w, pass.loss);
            }
            adam.step(model.params_mut(), &pass.grads)?;
            if !model.params().iter().all(|p| p.value.is_finite()) {
                return Err(Error::Diverged { step: t, loss: pass.loss });
            }
            last_loss = pass.loss;
            t += 1;

            if policy == UpdatePolicy::Periodic && schedule.is_update_step(t) {
                let target = schedule.target_sparsity(t)?;
                let mut g = model.prune_group();
                let before = g.flat_bits();
                let kept = prune_to_sparsity(&mut g, &model.prunable_weights(), &Magnitude, target)?;
                let reactivated = before
                    .iter()
                    .zip(g.flat_bits())
                    .filter(|(b, a)| !**b && *a)
                    .count();
                model.install_masks(&g)?;
                log.record_mask_update(MaskUpdate {
                    step: t,
                    target,
                    realized: g.sparsity(),
                    kept,
                    reactivated,
                });
            }
        }
        log.finish_epoch(evaluate(model.as_ref(), test)?);
    }
    log.finish();

    let dir = &config.output_dir;
    export_metrics(&log, dir, &config.to_json(), config.seed)?;
    let final_group = model.prune_group();
    let mask_path = dir.join(FINAL_MASK_FILE);
    write_mask_artifact(&mask_path, &final_group)?;
    save_checkpoint(
        dir.join(CHECKPOINT_DIR),
        model.as_ref(),
        serde_json::to_value(config)?,
        config.seed,
        t as u64,
    )?;
    Ok(RunOutput {
        final_test_accuracy: log.epochs.last().map_or(0.0, |e| e.test_accuracy),
        log,
        steps: t,
        final_sparsity: final_group.sparsity(),
        final_loss: last_loss,
        output_dir: dir.clone(),
        mask_path,
    })
}

/// `config` with its output directory replaced.
pub fn with_output(config: &TrainConfig, dir: impl AsRef<Path>) -> TrainConfig {
    TrainConfig {
        output_dir: dir.as_ref().to_path_buf(),
        ..config.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn synthetic_config(dir: &Path, strategy: StrategyKind) -> TrainConfig {
        TrainConfig {
            model: ModelSpec::Mlp(MlpConfig {
                input_dim: 12,
                hidden: vec![16],
                classes: 4,
            }),
            strategy,
            sparsity: 0.8,
            epochs: 3,
            update_interval: 5,
            merge_ratio: 0.0,
            learning_rate: 5e-3,
            batch_size: 16,
            seed: 21,
            data: DataSpec::Synthetic {
                spec: SynthSpec {
                    seed: 2,
                    n: 160,
                    dim: 12,
                    classes: 4,
                    margin: 3.0,
                },
                test_n: 40,
            },
            output_dir: dir.to_path_buf(),
            window: 7,
        }
    }

    #[test]
    fn iterative_run_ends_at_target_and_optimal_reuses_its_mask() {
        let root = tempfile::tempdir().unwrap();
        let it = run_experiment(&synthetic_config(&root.path().join("it"), StrategyKind::IterativePruning)).unwrap();
        let n = 12 * 16 + 16 * 4;
        assert_eq!(it.final_sparsity, 1.0 - crate::pruning::keep_count(n, 0.8) as f64 / n as f64);
        let targets: Vec<f64> = it.log.mask_updates.iter().map(|u| u.realized).collect();
        assert!(targets.windows(2).all(|w| w[1] >= w[0]), "{targets:?}");
        for u in &it.log.mask_updates[1..] {
            let k = crate::pruning::keep_count(n, u.target);
            assert_eq!(u.realized, 1.0 - k as f64 / n as f64);
        }
        assert!(it.log.epochs.iter().all(|e| e.test_accuracy > 0.25));

        let opt = run_experiment(&synthetic_config(
            &root.path().join("opt"),
            StrategyKind::OptimalSubnetwork {
                mask_path: it.mask_path.clone(),
            },
        ))
        .unwrap();
        assert_eq!(opt.log.mask_updates.len(), 1);
        assert_eq!(opt.final_sparsity, it.final_sparsity);
        let a = crate::pruning::read_mask_artifact(&it.mask_path).unwrap();
        let b = crate::pruning::read_mask_artifact(&opt.mask_path).unwrap();
        assert_eq!(a.flat_bits(), b.flat_bits());
    }

    #[test]
    fn strategies_share_initial_weights() {
        let root = tempfile::tempdir().unwrap();
        let config = synthetic_config(root.path(), StrategyKind::RandomSubnetwork);
        let a = build_model(&config, &mut RngState::derived(config.seed, STREAM_INIT)).unwrap();
        let other = TrainConfig {
            strategy: StrategyKind::IterativePruning,
            ..config.clone()
        };
        let b = build_model(&other, &mut RngState::derived(other.seed, STREAM_INIT)).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn reruns_are_identical() {
        let root = tempfile::tempdir().unwrap();
        let a = run_experiment(&synthetic_config(&root.path().join("a"), StrategyKind::RandomSubnetwork)).unwrap();
        let b = run_experiment(&synthetic_config(&root.path().join("b"), StrategyKind::RandomSubnetwork)).unwrap();
        assert_eq!(a.log, b.log);
        for f in ["grad_window.csv", "sparsity.csv", "test_accuracy.csv"] {
            assert_eq!(
                std::fs::read(root.path().join("a").join(f)).unwrap(),
                std::fs::read(root.path().join("b").join(f)).unwrap()
            );
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let root = tempfile::tempdir().unwrap();
        let mut config = synthetic_config(root.path(), StrategyKind::IterativePruning);
        config.learning_rate = 1e300;
        config.data = DataSpec::Synthetic {
            spec: SynthSpec {
                seed: 2,
                n: 160,
                dim: 12,
                classes: 4,
                margin: 1e200,
            },
            test_n: 4,
        };
        match run_experiment(&config) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn preflight_errors() {
        let root = tempfile::tempdir().unwrap();
        let mut c = synthetic_config(root.path(), StrategyKind::OptimalSubnetwork {
            mask_path: root.path().join("missing.bin"),
        });
        assert!(run_experiment(&c).unwrap_err().to_string().contains("missing.bin"));
        c.strategy = StrategyKind::IterativePruning;
        c.merge_ratio = 0.4;
        assert!(run_experiment(&c).is_err());
        c.merge_ratio = 0.0;
        c.data = DataSpec::Mnist {
            dir: root.path().join("nope"),
            native_28: false,
            max_train: None,
            max_test: None,
        };
        assert!(run_experiment(&c).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = synthetic_config(Path::new("out"), StrategyKind::IterativePruning);
        let back: TrainConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
