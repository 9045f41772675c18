//! Single-pass token merging by bipartite soft matching.
//!
//! Unprotected tokens alternate into sets A and B. Each A token proposes an
//! edge to its most similar B token (raw dot product), the `m` strongest edges
//! are kept, and every kept source is folded into its destination as a
//! size-weighted mean. Several sources may land on the same destination.

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Token rows with the number of original tokens each row stands for.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Matrix,
    pub sizes: Vec<usize>,
    pub protected: Vec<bool>,
}

impl TokenBatch {
    /// Unit sizes, nothing protected.
    pub fn new(tokens: Matrix) -> Self {
        let n = tokens.rows();
        Self {
            tokens,
            sizes: vec![1; n],
            protected: vec![false; n],
        }
    }

    /// Unit sizes with the first row protected (class token layout).
    pub fn with_class_token(tokens: Matrix) -> Self {
        let mut batch = Self::new(tokens);
        if let Some(first) = batch.protected.first_mut() {
            *first = true;
        }
        batch
    }

    pub fn from_parts(tokens: Matrix, sizes: Vec<usize>, protected: Vec<bool>) -> Result<Self> {
        let n = tokens.rows();
        if sizes.len() != n || protected.len() != n {
            return Err(Error::Shape(format!(
                "{n} tokens but {} sizes and {} protection flags",
                sizes.len(),
                protected.len()
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument("token sizes must be positive".into()));
        }
        Ok(Self {
            tokens,
            sizes,
            protected,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn unprotected_count(&self) -> usize {
        self.protected.iter().filter(|&&p| !p).count()
    }

    pub fn total_size(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// `Σ size_i · token_i`, the quantity merging conserves.
    pub fn weighted_sum(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.tokens.cols()];
        for (i, &s) in self.sizes.iter().enumerate() {
            for (a, &v) in acc.iter_mut().zip(self.tokens.row(i)) {
                *a += s as f64 * v;
            }
        }
        acc
    }
}

/// Token indices of the two matching sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

/// One kept edge; both fields are row indices into the input batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeEdge {
    pub source: usize,
    pub destination: usize,
    pub score: f64,
}

/// Kept edges ordered by descending score.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MergePlan {
    pub edges: Vec<MergeEdge>,
}

impl MergePlan {
    pub fn merge_count(&self) -> usize {
        self.edges.len()
    }
}

/// How each output row was formed: `(input row, weight)` pairs whose weights
/// sum to one. Used to route gradients back through a merge.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeTrace {
    pub input_len: usize,
    pub sources: Vec<Vec<(usize, f64)>>,
}

impl MergeTrace {
    pub fn identity(n: usize) -> Self {
        Self {
            input_len: n,
            sources: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    /// Gradient with respect to the input rows given the output-row gradient.
    pub fn backward(&self, grad_out: &Matrix) -> Matrix {
        let mut grad_in = Matrix::zeros(self.input_len, grad_out.cols());
        for (o, parts) in self.sources.iter().enumerate() {
            let g = grad_out.row(o);
            for &(i, w) in parts {
                for (dst, &v) in grad_in.row_mut(i).iter_mut().zip(g) {
                    *dst += w * v;
                }
            }
        }
        grad_in
    }
}

/// Alternating split of the unprotected tokens: even rank to A, odd rank to B.
pub fn partition_tokens(batch: &TokenBatch) -> Result<Partition> {
    let free: Vec<usize> = (0..batch.len()).filter(|&i| !batch.protected[i]).collect();
    if free.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 unprotected tokens to merge, have {}",
            free.len()
        )));
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (rank, idx) in free.into_iter().enumerate() {
        if rank % 2 == 0 {
            a.push(idx);
        } else {
            b.push(idx);
        }
    }
    Ok(Partition { a, b })
}

/// `|A| x |B|` dot products.
pub fn similarity_scores(batch: &TokenBatch, partition: &Partition) -> Matrix {
    let a = batch.tokens.select_rows(&partition.a);
    let b = batch.tokens.select_rows(&partition.b);
    a.matmul_nt(&b).expect("rows share the embedding width")
}

/// Best B match per A token, then the `m` strongest of those edges. Ties pick
/// the lower B column and then the lower A row.
pub fn bipartite_match(scores: &Matrix, partition: &Partition, m: usize) -> Result<MergePlan> {
    if scores.shape() != (partition.a.len(), partition.b.len()) {
        return Err(Error::Shape(format!(
            "scores are {:?}, partition is {}x{}",
            scores.shape(),
            partition.a.len(),
            partition.b.len()
        )));
    }
    if m > partition.a.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot merge {m} tokens from a source set of {}",
            partition.a.len()
        )));
    }
    let mut proposals: Vec<(usize, usize, f64)> = (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (j, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = j;
                }
            }
            (i, best, row[best])
        })
        .collect();
    proposals.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));
    let edges = proposals
        .into_iter()
        .take(m)
        .map(|(i, j, score)| MergeEdge {
            source: partition.a[i],
            destination: partition.b[j],
            score,
        })
        .collect();
    Ok(MergePlan { edges })
}

/// Applies `plan`, returning the merged batch.
pub fn merge_tokens(batch: &TokenBatch, plan: &MergePlan) -> Result<TokenBatch> {
    merge_tokens_traced(batch, plan).map(|(b, _)| b)
}

/// Applies `plan` and records how each output row was formed.
pub fn merge_tokens_traced(batch: &TokenBatch, plan: &MergePlan) -> Result<(TokenBatch, MergeTrace)> {
    let n = batch.len();
    let mut removed = vec![false; n];
    let mut absorbed: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &plan.edges {
        if e.source >= n || e.destination >= n || e.source == e.destination {
            return Err(Error::InvalidArgument(format!(
                "edge {} -> {} outside a batch of {n}",
                e.source, e.destination
            )));
        }
        if batch.protected[e.source] || batch.protected[e.destination] {
            return Err(Error::InvalidArgument("protected tokens cannot be merged".into()));
        }
        if removed[e.source] || !absorbed[e.source].is_empty() {
            return Err(Error::InvalidArgument(format!(
                "token {} is used as a source twice or as both source and destination",
                e.source
            )));
        }
        removed[e.source] = true;
        absorbed[e.destination].push(e.source);
    }
    if let Some(d) = (0..n).find(|&d| removed[d] && !absorbed[d].is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "token {d} is used as both source and destination"
        )));
    }

    let d = batch.tokens.cols();
    let survivors: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
    let mut tokens = Matrix::zeros(survivors.len(), d);
    let mut sizes = Vec::with_capacity(survivors.len());
    let mut protected = Vec::with_capacity(survivors.len());
    let mut sources = Vec::with_capacity(survivors.len());
    for (o, &i) in survivors.iter().enumerate() {
        let members: Vec<usize> = std::iter::once(i).chain(absorbed[i].iter().copied()).collect();
        let total: usize = members.iter().map(|&j| batch.sizes[j]).sum();
        let parts: Vec<(usize, f64)> = members
            .iter()
            .map(|&j| (j, batch.sizes[j] as f64 / total as f64))
            .collect();
        if parts.len() == 1 {
            tokens.row_mut(o).copy_from_slice(batch.tokens.row(i));
        } else {
            // Weighted sum first, then divide, so the conserved quantity
            // size * vector is formed from exact integer weights.
            let row = tokens.row_mut(o);
            for &j in &members {
                let s = batch.sizes[j] as f64;
                for (dst, &v) in row.iter_mut().zip(batch.tokens.row(j)) {
                    *dst += s * v;
                }
            }
            for v in row.iter_mut() {
                *v /= total as f64;
            }
        }
        sizes.push(total);
        protected.push(batch.protected[i]);
        sources.push(parts);
    }
    Ok((
        TokenBatch {
            tokens,
            sizes,
            protected,
        },
        MergeTrace { input_len: n, sources },
    ))
}

/// Number of merges for `ratio`: `floor(ratio · unprotected)` capped at `|A|`.
pub fn merge_count_for_ratio(unprotected: usize, ratio: f64) -> usize {
    let a_len = unprotected.div_ceil(2);
    let m = (ratio * unprotected as f64 + 1e-9).floor().max(0.0) as usize;
    m.min(a_len)
}

/// Partition, score, match and merge in one pass. Ratio 0 returns the input unchanged.
pub fn single_pass_merge(batch: &TokenBatch, ratio: f64) -> Result<TokenBatch> {
    single_pass_merge_traced(batch, ratio).map(|(b, _)| b)
}

pub fn single_pass_merge_traced(batch: &TokenBatch, ratio: f64) -> Result<(TokenBatch, MergeTrace)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "merge ratio must be in [0, 1), got {ratio}"
        )));
    }
    let m = merge_count_for_ratio(batch.unprotected_count(), ratio);
    if m == 0 {
        return Ok((batch.clone(), MergeTrace::identity(batch.len())));
    }
    let partition = partition_tokens(batch)?;
    let scores = similarity_scores(batch, &partition);
    let plan = bipartite_match(&scores, &partition, m)?;
    merge_tokens_traced(batch, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngState;

    fn random_tokens(rng: &mut RngState, n: usize, d: usize) -> Matrix {
        Matrix::from_fn(n, d, |_, _| rng.gaussian())
    }

    #[test]
    fn partition_alternates() {
        let p = partition_tokens(&TokenBatch::new(Matrix::zeros(4, 2))).unwrap();
        assert_eq!((p.a, p.b), (vec![0, 2], vec![1, 3]));
        let p = partition_tokens(&TokenBatch::with_class_token(Matrix::zeros(5, 2))).unwrap();
        assert_eq!((p.a, p.b), (vec![1, 3], vec![2, 4]));
        let p = partition_tokens(&TokenBatch::new(Matrix::zeros(196, 2))).unwrap();
        assert_eq!((p.a.len(), p.b.len()), (98, 98));
        assert!(partition_tokens(&TokenBatch::with_class_token(Matrix::zeros(2, 2))).is_err());
    }

    #[test]
    fn similarity_is_dot_product() {
        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]])
            .unwrap();
        let b = TokenBatch::new(t);
        let p = partition_tokens(&b).unwrap();
        let s = similarity_scores(&b, &p);
        // A = {0, 2}, B = {1, 3}
        assert_eq!(s.as_slice(), &[1.0, 0.0, 0.0, 1.0]);

        let mut rng = RngState::new(2);
        let b = TokenBatch::new(random_tokens(&mut rng, 5, 4));
        let p = partition_tokens(&b).unwrap();
        let s = similarity_scores(&b, &p);
        assert_eq!(s.shape(), (3, 2));
        for (i, &ai) in p.a.iter().enumerate() {
            for (j, &bj) in p.b.iter().enumerate() {
                let mut oracle = 0.0;
                for k in 0..4 {
                    oracle += b.tokens[(ai, k)] * b.tokens[(bj, k)];
                }
                assert_eq!(s[(i, j)], oracle);
            }
        }
    }

    #[test]
    fn zero_merges_is_empty_plan() {
        let p = Partition { a: vec![0, 2], b: vec![1, 3] };
        let plan = bipartite_match(&Matrix::zeros(2, 2), &p, 0).unwrap();
        assert!(plan.edges.is_empty());
        assert!(bipartite_match(&Matrix::zeros(2, 2), &p, 3).is_err());
    }

    #[test]
    fn duplicate_pair_is_selected() {
        let t = Matrix::from_rows(&[vec![3.0, 1.0], vec![-1.0, 2.0], vec![0.5, 0.1], vec![3.0, 1.0]])
            .unwrap();
        let b = TokenBatch::new(t);
        let p = partition_tokens(&b).unwrap();
        let plan = bipartite_match(&similarity_scores(&b, &p), &p, 1).unwrap();
        assert_eq!((plan.edges[0].source, plan.edges[0].destination), (0, 3));
    }

    /// Enumerates every m-subset of A under the best-edge-per-source rule and
    /// returns the one with maximal lexicographic (scores desc) profile.
    fn exhaustive_plan(scores: &Matrix, m: usize) -> Vec<(usize, usize)> {
        let rows = scores.rows();
        let best: Vec<(usize, f64)> = (0..rows)
            .map(|i| {
                let mut bj = 0;
                for j in 0..scores.cols() {
                    if scores[(i, j)] > scores[(i, bj)] {
                        bj = j;
                    }
                }
                (bj, scores[(i, bj)])
            })
            .collect();
        let mut winner: Option<(Vec<f64>, Vec<usize>)> = None;
        for subset in 0u32..(1 << rows) {
            if subset.count_ones() as usize != m {
                continue;
            }
            let mut chosen: Vec<usize> = (0..rows).filter(|&i| subset & (1 << i) != 0).collect();
            chosen.sort_by(|&x, &y| best[y].1.total_cmp(&best[x].1).then(x.cmp(&y)));
            let profile: Vec<f64> = chosen.iter().map(|&i| best[i].1).collect();
            let better = match &winner {
                None => true,
                Some((p, c)) => profile
                    .iter()
                    .zip(p)
                    .find(|(a, b)| a != b)
                    .map_or(chosen < *c, |(a, b)| a > b),
            };
            if better {
                winner = Some((profile, chosen));
            }
        }
        winner.unwrap().1.into_iter().map(|i| (i, best[i].0)).collect()
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = RngState::new(8);
        for _ in 0..50 {
            let scores = Matrix::from_fn(4, 4, |_, _| rng.gaussian());
            let p = Partition { a: vec![0, 1, 2, 3], b: vec![4, 5, 6, 7] };
            let plan = bipartite_match(&scores, &p, 2).unwrap();
            let got: Vec<(usize, usize)> = plan.edges.iter().map(|e| (e.source, e.destination - 4)).collect();
            assert_eq!(got, exhaustive_plan(&scores, 2));
        }
    }

    #[test]
    fn merging_identical_tokens_is_stable() {
        let t = Matrix::from_rows(&[vec![2.0, -1.0], vec![2.0, -1.0]]).unwrap();
        let b = TokenBatch::new(t);
        let plan = MergePlan {
            edges: vec![MergeEdge { source: 0, destination: 1, score: 5.0 }],
        };
        let out = merge_tokens(&b, &plan).unwrap();
        assert_eq!(out.tokens.as_slice(), &[2.0, -1.0]);
        assert_eq!(out.sizes, vec![2]);
    }

    #[test]
    fn unit_sizes_average() {
        let t = Matrix::from_rows(&[vec![1.0, 3.0], vec![5.0, -1.0]]).unwrap();
        let plan = MergePlan {
            edges: vec![MergeEdge { source: 0, destination: 1, score: 0.0 }],
        };
        let out = merge_tokens(&TokenBatch::new(t), &plan).unwrap();
        assert_eq!(out.tokens.as_slice(), &[3.0, 1.0]);
        assert_eq!(out.sizes, vec![2]);
    }

    #[test]
    fn chained_merge_is_weighted_centroid() {
        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![4.0, 4.0], vec![-2.0, 6.0]]).unwrap();
        let b = TokenBatch::from_parts(t.clone(), vec![2, 3, 1], vec![false; 3]).unwrap();
        let plan = MergePlan {
            edges: vec![
                MergeEdge { source: 0, destination: 1, score: 0.0 },
                MergeEdge { source: 2, destination: 1, score: 0.0 },
            ],
        };
        let out = merge_tokens(&b, &plan).unwrap();
        let centroid: Vec<f64> = (0..2)
            .map(|c| (2.0 * t[(0, c)] + 3.0 * t[(1, c)] + 1.0 * t[(2, c)]) / 6.0)
            .collect();
        for c in 0..2 {
            assert!((out.tokens[(0, c)] - centroid[c]).abs() < 1e-15);
        }
        assert_eq!(out.sizes, vec![6]);
    }

    #[test]
    fn rejects_bad_plans() {
        let b = TokenBatch::with_class_token(Matrix::zeros(4, 2));
        let touch_cls = MergePlan {
            edges: vec![MergeEdge { source: 1, destination: 0, score: 0.0 }],
        };
        assert!(merge_tokens(&b, &touch_cls).is_err());
        let twice = MergePlan {
            edges: vec![
                MergeEdge { source: 1, destination: 2, score: 0.0 },
                MergeEdge { source: 1, destination: 3, score: 0.0 },
            ],
        };
        assert!(merge_tokens(&b, &twice).is_err());
    }

    #[test]
    fn ratio_arithmetic() {
        assert_eq!(merge_count_for_ratio(196, 0.2), 39);
        assert_eq!(merge_count_for_ratio(196, 0.8), 98);
        assert_eq!(merge_count_for_ratio(64, 0.4), 25);
        let mut rng = RngState::new(1);
        let b = TokenBatch::new(random_tokens(&mut rng, 196, 8));
        let out = single_pass_merge(&b, 0.2).unwrap();
        assert_eq!(out.len(), 157);
    }

    #[test]
    fn ratio_zero_is_identity() {
        let mut rng = RngState::new(3);
        let b = TokenBatch::with_class_token(random_tokens(&mut rng, 17, 5));
        assert_eq!(single_pass_merge(&b, 0.0).unwrap(), b);
        assert!(single_pass_merge(&b, 1.0).is_err());
    }

    #[test]
    fn identical_tokens_survive_unchanged() {
        let row = vec![0.25, -3.0, 1.5];
        let t = Matrix::from_rows(&vec![row.clone(); 12]).unwrap();
        let out = single_pass_merge(&TokenBatch::new(t), 0.5).unwrap();
        assert_eq!(out.len(), 6);
        for r in 0..out.len() {
            assert_eq!(out.tokens.row(r), row.as_slice());
        }
    }

    #[test]
    fn trace_backward_is_transpose_of_forward() {
        let mut rng = RngState::new(6);
        let b = TokenBatch::with_class_token(random_tokens(&mut rng, 9, 3));
        let (out, trace) = single_pass_merge_traced(&b, 0.5).unwrap();
        // forward via trace equals merge output
        for (o, parts) in trace.sources.iter().enumerate() {
            for c in 0..3 {
                let v: f64 = parts.iter().map(|&(i, w)| w * b.tokens[(i, c)]).sum();
                assert!((v - out.tokens[(o, c)]).abs() < 1e-14);
            }
        }
        // <G, M x> = <Mᵀ G, x>
        let g = Matrix::from_fn(out.len(), 3, |_, _| rng.gaussian());
        let lhs: f64 = g.as_slice().iter().zip(out.tokens.as_slice()).map(|(a, b)| a * b).sum();
        let back = trace.backward(&g);
        let rhs: f64 = back.as_slice().iter().zip(b.tokens.as_slice()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn merging_conserves_mass_and_size(
                seed in any::<u64>(),
                n in 3usize..40,
                d in 1usize..8,
                ratio in 0.0f64..0.99,
                cls in any::<bool>(),
            ) {
                let mut rng = RngState::new(seed);
                let t = random_tokens(&mut rng, n, d);
                let b = if cls { TokenBatch::with_class_token(t) } else { TokenBatch::new(t) };
                let m = merge_count_for_ratio(b.unprotected_count(), ratio);
                let out = single_pass_merge(&b, ratio).unwrap();
                prop_assert_eq!(out.len(), n - m);
                prop_assert_eq!(out.total_size(), b.total_size());
                for (x, y) in out.weighted_sum().iter().zip(b.weighted_sum()) {
                    prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
                if cls {
                    prop_assert_eq!(out.tokens.row(0), b.tokens.row(0));
                    prop_assert!(out.protected[0]);
                }
                prop_assert_eq!(single_pass_merge(&b, ratio).unwrap(), out);
            }
        }
    }
}
