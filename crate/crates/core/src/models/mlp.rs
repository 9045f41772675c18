use serde::{Deserialize, Serialize};

use super::layers::{cross_entropy, linear_forward};
use super::{check_batch, MaskedLinear, Network, Param, Pass};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, RngState};

/// Fully connected ReLU classifier. Every weight matrix is prunable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Default for MlpConfig {
    /// 32×32 padded digits into 300-100-10.
    fn default() -> Self {
        Self {
            input_dim: 1024,
            hidden: vec![300, 100],
            classes: 10,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument("MLP layer widths must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.classes);
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<MaskedLinear>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn new(config: MlpConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| MaskedLinear::new(&format!("fc{}", i + 1), w[0], w[1], 2.0, true, rng))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[MaskedLinear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MaskedLinear] {
        &mut self.layers
    }

    /// Layer inputs, with the final pre-softmax output last.
    fn activations(&self, inputs: &Matrix) -> Result<Vec<Matrix>> {
        let last = self.layers.len() - 1;
        let mut acts = vec![inputs.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let w = layer.weight.effective();
            let mut y = linear_forward(acts.last().unwrap(), &w, layer.bias.as_ref().map(|b| &b.value))?;
            if i < last {
                y = y.map(|v| v.max(0.0));
            }
            acts.push(y);
        }
        Ok(acts)
    }
}

impl Network for Mlp {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.extend(l.bias.as_ref());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.extend(l.bias.as_mut());
        }
        out
    }

    fn forward_backward(&self, inputs: &Matrix, labels: &[usize]) -> Result<Pass> {
        check_batch(inputs, labels, self.config.input_dim, self.config.classes)?;
        let acts = self.activations(inputs)?;
        let logits = acts.last().unwrap().clone();
        let (loss, mut delta) = cross_entropy(&logits, labels)?;

        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                // ReLU gate on this layer's output.
                delta = delta.zip_with(&acts[i + 1], |d, a| if a > 0.0 { d } else { 0.0 })?;
            }
            let (dw, db, dx) = layer.backward(&acts[i], &delta)?;
            per_layer.push((dw, db));
            delta = dx;
        }
        per_layer.reverse();
        let mut grads = Vec::new();
        for (dw, db) in per_layer {
            grads.push(dw);
            grads.extend(db);
        }
        Ok(Pass { loss, logits, grads })
    }

    fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "expected {} input features, got {}",
                self.config.input_dim,
                inputs.cols()
            )));
        }
        Ok(self.activations(inputs)?.pop().unwrap())
    }
}
