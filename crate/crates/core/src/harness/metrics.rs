use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::pruning::PruneGroup;

pub const DEFAULT_WINDOW: usize = 100;

/// Mean |g| and |w| over steps `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMean {
    pub start: usize,
    pub end: usize,
    pub grad: f64,
    pub weight: f64,
    pub loss: f64,
    /// Shorter than the window size; only the last window can be partial.
    pub partial: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Steps completed when the epoch ended.
    pub step: usize,
    /// Mean over every step so far of the per-step means.
    pub cumulative_grad: f64,
    pub cumulative_weight: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskUpdate {
    pub step: usize,
    pub target: f64,
    pub realized: f64,
    pub kept: usize,
    pub reactivated: usize,
}

/// Training trace. Gradient and weight means cover unmasked prunable
/// entries only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub window: usize,
    pub step_grad: Vec<f64>,
    pub step_weight: Vec<f64>,
    pub step_loss: Vec<f64>,
    pub windows: Vec<WindowMean>,
    pub epochs: Vec<EpochRecord>,
    pub mask_updates: Vec<MaskUpdate>,
    epoch_start: usize,
}

impl Default for MetricsLog {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW).expect("default window is positive")
    }
}

/// Mean |g| and mean |w| over entries whose mask bit is on. Zero when
/// nothing is unmasked.
pub fn unmasked_means(grads: &[&Matrix], weights: &[&Matrix], masks: &PruneGroup) -> Result<(f64, f64)> {
    let entries = masks.entries();
    if grads.len() != entries.len() || weights.len() != entries.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} weights for {} masks",
            grads.len(),
            weights.len(),
            entries.len()
        )));
    }
    let (mut g_sum, mut w_sum, mut count) = (0.0, 0.0, 0usize);
    for ((g, w), (id, m)) in grads.iter().zip(weights).zip(entries) {
        if g.shape() != m.shape() || w.shape() != m.shape() {
            return Err(Error::Shape(format!("tensor {id} does not match its mask")));
        }
        for (i, (gv, wv)) in g.as_slice().iter().zip(w.as_slice()).enumerate() {
            if m.get(i) {
                g_sum += gv.abs();
                w_sum += wv.abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((g_sum / count as f64, w_sum / count as f64))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl MetricsLog {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("window size must be positive".into()));
        }
        Ok(Self {
            window,
            step_grad: Vec::new(),
            step_weight: Vec::new(),
            step_loss: Vec::new(),
            windows: Vec::new(),
            epochs: Vec::new(),
            mask_updates: Vec::new(),
            epoch_start: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.step_grad.len()
    }

    /// Appends one step; closes a window at every exact multiple of the window size.
    pub fn record_step(&mut self, grads: &[&Matrix], weights: &[&Matrix], masks: &PruneGroup, loss: f64) -> Result<()> {
        let (g, w) = unmasked_means(grads, weights, masks)?;
        self.push_step(g, w, loss);
        Ok(())
    }

    /// Same as [`MetricsLog::record_step`] with the per-step means precomputed.
    pub fn push_step(&mut self, grad: f64, weight: f64, loss: f64) {
        self.step_grad.push(grad);
        self.step_weight.push(weight);
        self.step_loss.push(loss);
        let t = self.steps();
        if t % self.window == 0 {
            self.close_window(t - self.window, t, false);
        }
    }

    fn close_window(&mut self, start: usize, end: usize, partial: bool) {
        self.windows.push(WindowMean {
            start,
            end,
            grad: mean(&self.step_grad[start..end]),
            weight: mean(&self.step_weight[start..end]),
            loss: mean(&self.step_loss[start..end]),
            partial,
        });
    }

    pub fn record_mask_update(&mut self, update: MaskUpdate) {
        self.mask_updates.push(update);
    }

    pub fn finish_epoch(&mut self, test_accuracy: f64) {
        let step = self.steps();
        self.epochs.push(EpochRecord {
            epoch: self.epochs.len() + 1,
            step,
            cumulative_grad: mean(&self.step_grad),
            cumulative_weight: mean(&self.step_weight),
            train_loss: mean(&self.step_loss[self.epoch_start..]),
            test_accuracy,
        });
        self.epoch_start = step;
    }

    /// Records the trailing partial window, if any. Idempotent.
    pub fn finish(&mut self) {
        let closed = self.windows.last().map_or(0, |w| w.end);
        let t = self.steps();
        if t > closed {
            self.close_window(closed, t, true);
        }
    }
}
