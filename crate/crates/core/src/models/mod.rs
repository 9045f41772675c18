//! Maskable networks with hand-written backward passes.
//!
//! Every model exposes its parameters as a flat, ordered list of [`Param`]s.
//! Prunable weights carry a [`Mask`]; the forward pass uses `w ⊙ m` and the
//! backward pass multiplies the weight gradient by `m`, so masked entries get
//! no update but keep their stored value.

mod checkpoint;
mod layers;
mod mlp;
mod optim;
mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use layers::{cross_entropy, gelu, gelu_deriv, LayerNorm, MaskedLinear};
pub use mlp::{Mlp, MlpConfig};
pub use optim::Adam;
pub use vit::{patchify, Vit, VitConfig, VitTrace};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, RngState};
use crate::pruning::{Mask, PruneGroup};

/// One named tensor. `mask` is present exactly for prunable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub mask: Option<Mask>,
}

impl Param {
    pub fn dense(name: impl Into<String>, value: Matrix) -> Self {
        Self {
            name: name.into(),
            value,
            mask: None,
        }
    }

    pub fn prunable(name: impl Into<String>, value: Matrix) -> Self {
        let mask = Mask::dense(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            mask: Some(mask),
        }
    }

    /// Normal draws with the given standard deviation.
    pub fn gaussian(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        prunable: bool,
        rng: &mut RngState,
    ) -> Self {
        let value = Matrix::from_fn(rows, cols, |_, _| rng.gaussian() * std);
        if prunable {
            Self::prunable(name, value)
        } else {
            Self::dense(name, value)
        }
    }

    pub fn is_prunable(&self) -> bool {
        self.mask.is_some()
    }

    /// The value the forward pass sees: `w ⊙ m`, or `w` when unmasked.
    pub fn effective(&self) -> Matrix {
        match &self.mask {
            Some(m) => {
                let mut v = self.value.clone();
                m.gate_in_place(&mut v).expect("mask built for this tensor");
                v
            }
            None => self.value.clone(),
        }
    }

    /// Zeroes gradient entries whose mask bit is off.
    pub fn gate_grad(&self, grad: &mut Matrix) {
        if let Some(m) = &self.mask {
            m.gate_in_place(grad).expect("gradient shaped like its parameter");
        }
    }
}

/// Result of one forward and backward pass over a batch.
#[derive(Clone, Debug)]
pub struct Pass {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub logits: Matrix,
    /// One gradient per parameter, in [`Network::params`] order.
    pub grads: Vec<Matrix>,
}

pub trait Network {
    fn params(&self) -> Vec<&Param>;

    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Inputs are one flattened example per row.
    fn forward_backward(&self, inputs: &Matrix, labels: &[usize]) -> Result<Pass>;

    fn logits(&self, inputs: &Matrix) -> Result<Matrix>;

    /// Masks of every prunable tensor, in parameter order.
    fn prune_group(&self) -> PruneGroup {
        let mut group = PruneGroup::new();
        for p in self.params() {
            if let Some(m) = &p.mask {
                group
                    .push(p.name.clone(), m.clone())
                    .expect("parameter names are unique");
            }
        }
        group
    }

    /// Stored (unmasked) values of the prunable tensors, lined up with [`Network::prune_group`].
    fn prunable_weights(&self) -> Vec<&Matrix> {
        self.params()
            .into_iter()
            .filter(|p| p.is_prunable())
            .map(|p| &p.value)
            .collect()
    }

    /// Replaces every prunable tensor's mask from `group`.
    fn install_masks(&mut self, group: &PruneGroup) -> Result<()> {
        if !self.prune_group().same_layout(group) {
            return Err(Error::Shape("mask group does not match the model's prunable tensors".into()));
        }
        let mut masks = group.entries().iter();
        for p in self.params_mut() {
            if p.mask.is_some() {
                let (_, m) = masks.next().expect("layouts match");
                p.mask = Some(m.clone());
            }
        }
        Ok(())
    }
}

/// Total number of prunable elements.
pub fn count_prunable(model: &dyn Network) -> usize {
    model.prune_group().len()
}

/// Classification accuracy of `model` on `inputs`.
pub fn accuracy(model: &dyn Network, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let logits = model.logits(inputs)?;
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn check_batch(inputs: &Matrix, labels: &[usize], width: usize, classes: usize) -> Result<()> {
    if inputs.cols() != width {
        return Err(Error::Shape(format!(
            "expected {width} input features, got {}",
            inputs.cols()
        )));
    }
    if inputs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} labels",
            inputs.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    Ok(())
}
