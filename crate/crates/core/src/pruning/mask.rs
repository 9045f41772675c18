use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Binary gate aligned element-wise with one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
    generation: u64,
}

impl Mask {
    /// All-ones mask, the state before any pruning.
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
            generation: 0,
        }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} mask needs {} bits, got {}",
                rows * cols,
                bits.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            bits,
            generation: 0,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// Number of updates applied since construction.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of zero bits, computed as `1 - kept/n`.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        1.0 - self.count_ones() as f64 / self.len() as f64
    }

    /// Multiplies `values` by the gate in place.
    pub fn gate_in_place(&self, values: &mut Matrix) -> Result<()> {
        self.check_shape(values)?;
        for (v, &b) in values.as_mut_slice().iter_mut().zip(&self.bits) {
            if !b {
                *v = 0.0;
            }
        }
        Ok(())
    }

    fn check_shape(&self, values: &Matrix) -> Result<()> {
        if values.shape() != self.shape() {
            return Err(Error::Shape(format!(
                "mask {}x{} vs tensor {}x{}",
                self.rows,
                self.cols,
                values.rows(),
                values.cols()
            )));
        }
        Ok(())
    }
}

/// `w ⊙ m`.
pub fn apply_mask(weights: &Matrix, mask: &Mask) -> Result<Matrix> {
    let mut out = weights.clone();
    mask.gate_in_place(&mut out)?;
    Ok(out)
}

/// Masks that are ranked together when choosing which weights survive.
///
/// The flat index of an element is its offset within its tensor plus the sizes
/// of all tensors before it in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PruneGroup {
    entries: Vec<(String, Mask)>,
}

impl PruneGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: impl Into<String>, mask: Mask) -> Result<()> {
        let id = id.into();
        if self.entries.iter().any(|(existing, _)| *existing == id) {
            return Err(Error::InvalidArgument(format!("tensor `{id}` is already in the group")));
        }
        self.entries.push((id, mask));
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Mask)] {
        &self.entries
    }

    pub fn mask(&self, id: &str) -> Option<&Mask> {
        self.entries.iter().find(|(i, _)| i == id).map(|(_, m)| m)
    }

    pub fn tensor_count(&self) -> usize {
        self.entries.len()
    }

    /// Total number of prunable elements.
    pub fn len(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_ones(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.count_ones()).sum()
    }

    /// Global fraction of zero bits, computed as `1 - kept/n`.
    pub fn sparsity(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        1.0 - self.count_ones() as f64 / n as f64
    }

    /// Same tensors and shapes, in the same order.
    pub fn same_layout(&self, other: &PruneGroup) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ma), (b, mb))| a == b && ma.shape() == mb.shape())
    }

    /// Every bit concatenated in flat-index order.
    pub fn flat_bits(&self) -> Vec<bool> {
        self.entries
            .iter()
            .flat_map(|(_, m)| m.bits.iter().copied())
            .collect()
    }

    /// Replaces every bit from a flat vector and bumps each mask's generation.
    pub fn set_flat_bits(&mut self, bits: &[bool]) -> Result<()> {
        if bits.len() != self.len() {
            return Err(Error::Shape(format!(
                "group has {} elements, got {} bits",
                self.len(),
                bits.len()
            )));
        }
        let mut offset = 0;
        for (_, mask) in &mut self.entries {
            let n = mask.len();
            mask.bits.copy_from_slice(&bits[offset..offset + n]);
            mask.generation += 1;
            offset += n;
        }
        Ok(())
    }

    /// Same layout with every bit set.
    pub fn densified(&self) -> PruneGroup {
        PruneGroup {
            entries: self
                .entries
                .iter()
                .map(|(id, m)| (id.clone(), Mask::dense(m.rows, m.cols)))
                .collect(),
        }
    }
}

/// Per-element importance used to rank weights for survival.
pub trait ImportanceScore {
    fn score(&self, weight: f64) -> f64;
}

/// `|w|`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Magnitude;

impl ImportanceScore for Magnitude {
    #[inline]
    fn score(&self, weight: f64) -> f64 {
        weight.abs()
    }
}

/// Scores for every element of the group, in flat-index order.
///
/// `weights` must line up with the group's tensors. Scores are taken on the
/// stored weights, not on the masked product, so pruned entries keep competing.
pub fn importance_scores(
    group: &PruneGroup,
    weights: &[&Matrix],
    scorer: &dyn ImportanceScore,
) -> Result<Vec<f64>> {
    if weights.len() != group.tensor_count() {
        return Err(Error::Shape(format!(
            "group has {} tensors, got {} weight matrices",
            group.tensor_count(),
            weights.len()
        )));
    }
    let mut scores = Vec::with_capacity(group.len());
    for ((id, mask), w) in group.entries.iter().zip(weights) {
        if w.shape() != mask.shape() {
            return Err(Error::Shape(format!(
                "tensor `{id}` is {:?} but its mask is {:?}",
                w.shape(),
                mask.shape()
            )));
        }
        for &v in w.as_slice() {
            if v.is_nan() {
                return Err(Error::NonFinite(format!("NaN weight in tensor `{id}`")));
            }
            scores.push(scorer.score(v));
        }
    }
    Ok(scores)
}

/// The `k`-th largest score.
pub fn select_threshold(scores: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "keep count {k} outside 1..={}",
            scores.len()
        )));
    }
    let mut work = scores.to_vec();
    let (_, kth, _) = work.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    Ok(*kth)
}

/// Sets each bit to `score > threshold`, then fills ties at the threshold in
/// ascending flat index until `k` bits are set. Previously zeroed bits may come
/// back. Returns the number of set bits.
pub fn update_mask(group: &mut PruneGroup, scores: &[f64], threshold: f64, k: usize) -> Result<usize> {
    if scores.len() != group.len() {
        return Err(Error::Shape(format!(
            "group has {} elements, got {} scores",
            group.len(),
            scores.len()
        )));
    }
    let above = scores.iter().filter(|&&s| s > threshold).count();
    let mut tie_budget = k.saturating_sub(above);
    let bits: Vec<bool> = scores
        .iter()
        .map(|&s| {
            if s > threshold {
                true
            } else if s == threshold && tie_budget > 0 {
                tie_budget -= 1;
                true
            } else {
                false
            }
        })
        .collect();
    let kept = bits.iter().filter(|&&b| b).count();
    group.set_flat_bits(&bits)?;
    Ok(kept)
}

/// One full mask update: score, rank, gate to exactly `keep_count(n, sparsity)`
/// survivors. Returns the number kept.
pub fn prune_to_sparsity(
    group: &mut PruneGroup,
    weights: &[&Matrix],
    scorer: &dyn ImportanceScore,
    sparsity: f64,
) -> Result<usize> {
    let scores = importance_scores(group, weights, scorer)?;
    let k = super::keep_count(scores.len(), sparsity);
    let threshold = select_threshold(&scores, k)?;
    update_mask(group, &scores, threshold, k)
}
