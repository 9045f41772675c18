use super::Param;
use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Adam with bias correction.
///
/// Entries whose mask bit is off are skipped entirely: neither the weight nor
/// its moments move, so a pruned weight keeps its stored value and restarts
/// from its old moments if the mask later revives it.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Param>, grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.value.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for {}", p.name)));
            }
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let w = p.value.as_mut_slice();
            for (j, &gj) in g.as_slice().iter().enumerate() {
                if let Some(mask) = &p.mask {
                    if !mask.get(j) {
                        continue;
                    }
                }
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                w[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::Mask;

    #[test]
    fn masked_entries_never_move() {
        let mut p = Param::prunable("w", Matrix::from_fn(3, 3, |r, c| (r * 3 + c) as f64 + 1.0));
        let bits: Vec<bool> = (0..9).map(|i| i % 4 != 1).collect();
        p.mask = Some(Mask::from_bits(3, 3, bits.clone()).unwrap());
        let before = p.value.clone();
        let mut adam = Adam::new(0.1).unwrap();
        for s in 0..20 {
            let g = Matrix::filled(3, 3, 1.0 + s as f64);
            adam.step(vec![&mut p], &[g]).unwrap();
        }
        for (i, b) in bits.iter().enumerate() {
            if *b {
                assert_ne!(p.value.as_slice()[i], before.as_slice()[i]);
            } else {
                assert_eq!(p.value.as_slice()[i], before.as_slice()[i]);
            }
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::dense("b", Matrix::zeros(1, 2));
        let mut adam = Adam::new(0.01).unwrap();
        adam.step(vec![&mut p], &[Matrix::row_vector(vec![3.0, -0.5])]).unwrap();
        assert!((p.value.as_slice()[0] + 0.01).abs() < 1e-9);
        assert!((p.value.as_slice()[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn bad_learning_rate() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(f64::NAN).is_err());
    }
}
