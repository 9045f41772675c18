use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cubic ramp from dense to `final_sparsity` over `total_iterations` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    pub final_sparsity: f64,
    pub total_iterations: usize,
    pub update_interval: usize,
}

impl SparsitySchedule {
    pub const DEFAULT_UPDATE_INTERVAL: usize = 100;

    pub fn new(final_sparsity: f64, total_iterations: usize, update_interval: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&final_sparsity) {
            return Err(Error::InvalidArgument(format!(
                "final sparsity must be in [0, 1), got {final_sparsity}"
            )));
        }
        if total_iterations == 0 || update_interval == 0 {
            return Err(Error::InvalidArgument(
                "total iterations and update interval must be positive".into(),
            ));
        }
        Ok(Self {
            final_sparsity,
            total_iterations,
            update_interval,
        })
    }

    /// `r - r (1 - t/T)^3`; exactly 0 at `t = 0` and exactly `r` at `t = T`.
    pub fn target_sparsity(&self, t: usize) -> Result<f64> {
        if t > self.total_iterations {
            return Err(Error::InvalidArgument(format!(
                "step {t} beyond schedule length {}",
                self.total_iterations
            )));
        }
        let r = self.final_sparsity;
        let remaining = 1.0 - t as f64 / self.total_iterations as f64;
        Ok(r - r * (remaining * remaining * remaining))
    }

    /// Mask updates happen every `update_interval` steps and once more at the
    /// final step so the run always lands on the final sparsity.
    pub fn is_update_step(&self, t: usize) -> bool {
        t > 0 && t <= self.total_iterations && (t % self.update_interval == 0 || t == self.total_iterations)
    }

    pub fn update_steps(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.total_iterations).filter(|&t| self.is_update_step(t))
    }
}

/// Number of surviving elements, `floor(n (1 - r_t))`, never below one.
///
/// Products within 1e-9 of an integer snap to it, so `1000 * (1 - 0.9)` keeps
/// 100 elements rather than 99.
pub fn keep_count(n: usize, sparsity: f64) -> usize {
    let exact = n as f64 * (1.0 - sparsity);
    let nearest = exact.round();
    let kept = if (exact - nearest).abs() <= 1e-9 * exact.abs().max(1.0) {
        nearest
    } else {
        exact.floor()
    };
    (kept.max(0.0) as usize).clamp(1, n.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        for &r in &[0.0, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95] {
            let s = SparsitySchedule::new(r, 4690, 100).unwrap();
            assert_eq!(s.target_sparsity(0).unwrap(), 0.0);
            assert_eq!(s.target_sparsity(4690).unwrap(), r);
        }
    }

    #[test]
    fn midpoint_value() {
        let s = SparsitySchedule::new(0.8, 100, 10).unwrap();
        assert!((s.target_sparsity(50).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_step() {
        let s = SparsitySchedule::new(0.5, 10, 1).unwrap();
        assert!(s.target_sparsity(11).is_err());
        assert!(SparsitySchedule::new(1.0, 10, 1).is_err());
        assert!(SparsitySchedule::new(0.5, 0, 1).is_err());
    }

    #[test]
    fn update_steps_include_the_end() {
        let s = SparsitySchedule::new(0.9, 250, 100).unwrap();
        assert_eq!(s.update_steps().collect::<Vec<_>>(), vec![100, 200, 250]);
    }

    #[test]
    fn keep_count_cases() {
        assert_eq!(keep_count(1000, 0.9), 100);
        assert_eq!(keep_count(10, 0.0), 10);
        assert_eq!(keep_count(7, 0.5), 3);
        assert_eq!(keep_count(5, 0.99), 1);
    }

    #[test]
    fn keep_count_matches_integer_brute_force() {
        // Sparsities of the form p/q with q | n have an exact integer answer.
        for n in 1..200usize {
            for pruned in 0..n {
                let r = pruned as f64 / n as f64;
                assert_eq!(keep_count(n, r), n - pruned, "n={n} pruned={pruned}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn schedule_is_monotone(r in 0.0f64..0.999, total in 1usize..10_000, a in 0usize..10_000, b in 0usize..10_000) {
                let s = SparsitySchedule::new(r, total, 1).unwrap();
                let (lo, hi) = (a.min(b) % (total + 1), a.max(b) % (total + 1));
                let (lo, hi) = (lo.min(hi), lo.max(hi));
                prop_assert!(s.target_sparsity(lo).unwrap() <= s.target_sparsity(hi).unwrap());
            }
        }
    }
}
