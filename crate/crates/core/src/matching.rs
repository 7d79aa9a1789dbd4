//! Deciding which tokens to merge.
//!
//! The fast path is `bipartite_soft_matching`: split the tokens into two
//! sets, give every token in set A a single edge to its most similar token
//! in set B, and keep the best `r` edges. `greedy_matching` and
//! `random_prune` are the comparison baselines.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, HeadTensor, Matrix};

/// Rows whose L2 norm falls below this are treated as having no direction.
pub const COSINE_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
    Dot,
    /// Experimental: edge score is the row-softmax (over set B) of dot
    /// products.
    SoftmaxSim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    #[default]
    Mean,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStyle {
    #[default]
    Alternating,
    Sequential,
    Random,
}

/// Head-aggregated vectors ready for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityInput<T> {
    vectors: Matrix<T>,
    protected: Vec<usize>,
    metric: Metric,
    /// Rows that can never take part in a merge (zero rows under cosine).
    inert: Vec<bool>,
}

impl<T: Scalar> SimilarityInput<T> {
    /// Wraps already-prepared vectors. Under cosine the rows are normalized
    /// here, so callers may pass raw vectors.
    pub fn new(vectors: Matrix<T>, protected: &[usize], metric: Metric) -> Result<Self> {
        let n = vectors.rows();
        if n == 0 {
            return invalid("similarity input needs at least one token");
        }
        if !vectors.is_finite() {
            return invalid("similarity vectors must be finite");
        }
        let mut protected = protected.to_vec();
        protected.sort_unstable();
        protected.dedup();
        if let Some(&p) = protected.iter().find(|&&p| p >= n) {
            return invalid(format!("protected index {p} out of range for {n} tokens"));
        }
        let mut vectors = vectors;
        let mut inert = vec![false; n];
        if metric == Metric::Cosine {
            let eps = T::lit(COSINE_NORM_EPS);
            for (i, flag) in inert.iter_mut().enumerate() {
                let row = vectors.row_mut(i);
                let norm = dot(row, row).sqrt();
                if norm < eps {
                    *flag = true;
                } else {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        Ok(Self {
            vectors,
            protected,
            metric,
            inert,
        })
    }

    pub fn vectors(&self) -> &Matrix<T> {
        &self.vectors
    }

    pub fn protected(&self) -> &[usize] {
        &self.protected
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn is_protected(&self, i: usize) -> bool {
        self.protected.binary_search(&i).is_ok()
    }

    /// True if the token may appear in an edge at all.
    pub fn is_mergeable(&self, i: usize) -> bool {
        !self.inert[i] && !self.is_protected(i)
    }

    /// Raw pairwise similarity; higher is more similar. Only defined for
    /// cosine, euclidean and dot (softmax needs a whole row).
    fn pair_score(&self, a: usize, b: usize) -> T {
        let (x, y) = (self.vectors.row(a), self.vectors.row(b));
        match self.metric {
            Metric::Cosine | Metric::Dot | Metric::SoftmaxSim => dot(x, y),
            Metric::Euclidean => {
                let mut acc = T::zero();
                for (&p, &q) in x.iter().zip(y) {
                    let d = p - q;
                    acc += d * d;
                }
                -acc
            }
        }
    }

    /// Scores from `a` to every token of `set_b`; blocked targets get -inf.
    pub fn score_row(&self, a: usize, set_b: &[usize]) -> Vec<T> {
        let mut row: Vec<T> = set_b
            .iter()
            .map(|&b| {
                if self.is_mergeable(a) && self.is_mergeable(b) {
                    self.pair_score(a, b)
                } else {
                    T::neg_infinity()
                }
            })
            .collect();
        if self.metric == Metric::SoftmaxSim && row.iter().any(|v| v.is_finite()) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = if *v > T::zero() { *v / sum } else { T::neg_infinity() };
            }
        }
        row
    }
}

/// Aggregates per-head features into one vector per token.
pub fn prepare_similarity<T: Scalar>(
    keys_per_head: &HeadTensor<T>,
    aggregation: HeadAggregation,
    metric: Metric,
    protected: &[usize],
) -> Result<SimilarityInput<T>> {
    let (h, n, d) = (keys_per_head.heads(), keys_per_head.tokens(), keys_per_head.dim());
    if h == 0 {
        return invalid("need at least one head");
    }
    if !keys_per_head.is_finite() {
        return invalid("similarity features must be finite");
    }
    let vectors = match aggregation {
        HeadAggregation::Mean => {
            let mut m = Matrix::zeros(n, d);
            let scale = T::of_usize(h);
            for t in 0..n {
                let out = m.row_mut(t);
                for head in 0..h {
                    for (o, &v) in out.iter_mut().zip(keys_per_head.row(head, t)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|v| *v /= scale);
            }
            m
        }
        HeadAggregation::Concat => {
            let mut m = Matrix::zeros(n, h * d);
            for t in 0..n {
                let out = m.row_mut(t);
                for head in 0..h {
                    out[head * d..(head + 1) * d].copy_from_slice(keys_per_head.row(head, t));
                }
            }
            m
        }
    };
    SimilarityInput::new(vectors, protected, metric)
}

/// The two sides of the bipartite graph, each ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub set_a: Vec<usize>,
    pub set_b: Vec<usize>,
}

impl Partition {
    pub fn new(n: usize, style: PartitionStyle, protected: &[usize], seed: u64) -> Result<Self> {
        match style {
            PartitionStyle::Alternating => partition_alternating(n),
            PartitionStyle::Sequential => partition_sequential(n),
            PartitionStyle::Random => partition_random(n, protected, seed),
        }
    }

    pub fn n(&self) -> usize {
        self.set_a.len() + self.set_b.len()
    }

    fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.set_a.iter().chain(&self.set_b) {
            if i >= n || seen[i] {
                return invalid(format!("partition is not a split of 0..{n}"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return invalid(format!("partition does not cover 0..{n}"));
        }
        Ok(())
    }
}

/// Even indices to A, odd indices to B.
pub fn partition_alternating(n: usize) -> Result<Partition> {
    if n < 2 {
        return invalid(format!("cannot partition {n} token(s)"));
    }
    Ok(Partition {
        set_a: (0..n).step_by(2).collect(),
        set_b: (1..n).step_by(2).collect(),
    })
}

/// First half to A (the larger half when `n` is odd), second half to B.
pub fn partition_sequential(n: usize) -> Result<Partition> {
    if n < 2 {
        return invalid(format!("cannot partition {n} token(s)"));
    }
    let split = n.div_ceil(2);
    Ok(Partition {
        set_a: (0..split).collect(),
        set_b: (split..n).collect(),
    })
}

/// Random split of the same sizes as the alternating one. Protected tokens
/// always land in A.
pub fn partition_random(n: usize, protected: &[usize], seed: u64) -> Result<Partition> {
    if n < 2 {
        return invalid(format!("cannot partition {n} token(s)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let is_protected = |i: &usize| protected.contains(i);
    let mut set_a: Vec<usize> = (0..n).filter(is_protected).collect();
    let mut rest: Vec<usize> = (0..n).filter(|i| !is_protected(i)).collect();
    rest.shuffle(&mut rng);
    let take = n.div_ceil(2).saturating_sub(set_a.len()).min(rest.len());
    set_a.extend_from_slice(&rest[..take]);
    let mut set_b = rest[take..].to_vec();
    set_a.sort_unstable();
    set_b.sort_unstable();
    Ok(Partition { set_a, set_b })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
}

/// One output token: the kept token plus every token folded into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGroup {
    pub dst: usize,
    /// Ascending original indices.
    pub srcs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergePlan {
    n_in: usize,
    r_requested: usize,
    /// Kept edges, best first.
    edges: Vec<Edge>,
    unmerged_a: Vec<usize>,
    set_b: Vec<usize>,
    output_order: Vec<TokenGroup>,
}

impl MergePlan {
    /// A plan that merges nothing and keeps the input order.
    ///
    /// Represented as every token in A with an empty B, which makes the
    /// "unmerged A, then B" ordering the identity.
    pub fn identity(n_in: usize, r_requested: usize) -> Self {
        let unmerged_a: Vec<usize> = (0..n_in).collect();
        let output_order = unmerged_a
            .iter()
            .map(|&i| TokenGroup { dst: i, srcs: Vec::new() })
            .collect();
        Self {
            n_in,
            r_requested,
            edges: Vec::new(),
            unmerged_a,
            set_b: Vec::new(),
            output_order,
        }
    }

    /// Builds and validates a plan from explicit edges. An empty edge list
    /// yields the identity plan.
    pub fn from_edges(
        n_in: usize,
        r_requested: usize,
        partition: &Partition,
        edges: Vec<Edge>,
    ) -> Result<Self> {
        if edges.is_empty() {
            return Ok(Self::identity(n_in, r_requested));
        }
        partition.validate(n_in)?;
        let mut in_a = vec![false; n_in];
        let mut in_b = vec![false; n_in];
        partition.set_a.iter().for_each(|&i| in_a[i] = true);
        partition.set_b.iter().for_each(|&i| in_b[i] = true);

        let mut merged_src = vec![false; n_in];
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n_in];
        for e in &edges {
            if e.src >= n_in || !in_a[e.src] {
                return invalid(format!("edge source {} is not in set A", e.src));
            }
            if e.dst >= n_in || !in_b[e.dst] {
                return invalid(format!("edge destination {} is not in set B", e.dst));
            }
            if merged_src[e.src] {
                return invalid(format!("token {} has more than one outgoing edge", e.src));
            }
            merged_src[e.src] = true;
            incoming[e.dst].push(e.src);
        }
        let unmerged_a: Vec<usize> = partition
            .set_a
            .iter()
            .copied()
            .filter(|&a| !merged_src[a])
            .collect();
        if unmerged_a.is_empty() {
            return invalid("a plan may not merge every token of set A");
        }
        let mut output_order: Vec<TokenGroup> = unmerged_a
            .iter()
            .map(|&a| TokenGroup { dst: a, srcs: Vec::new() })
            .collect();
        for &b in &partition.set_b {
            let mut srcs = std::mem::take(&mut incoming[b]);
            srcs.sort_unstable();
            output_order.push(TokenGroup { dst: b, srcs });
        }
        Ok(Self {
            n_in,
            r_requested,
            edges,
            unmerged_a,
            set_b: partition.set_b.clone(),
            output_order,
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn r_requested(&self) -> usize {
        self.r_requested
    }

    pub fn r_effective(&self) -> usize {
        self.edges.len()
    }

    pub fn n_out(&self) -> usize {
        self.n_in - self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn unmerged_a(&self) -> &[usize] {
        &self.unmerged_a
    }

    pub fn set_b(&self) -> &[usize] {
        &self.set_b
    }

    pub fn output_order(&self) -> &[TokenGroup] {
        &self.output_order
    }

    pub fn is_identity(&self) -> bool {
        self.edges.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrunePlan {
    pub n_in: usize,
    /// Ascending surviving indices.
    pub kept: Vec<usize>,
}


/// Bipartite soft matching with the alternating split.
pub fn bipartite_soft_matching<T: Scalar>(sim: &SimilarityInput<T>, r: usize) -> Result<MergePlan> {
    if r == 0 || sim.len() < 2 {
        return Ok(MergePlan::identity(sim.len(), r));
    }
    bipartite_soft_matching_with(sim, r, &partition_alternating(sim.len())?)
}

/// Bipartite soft matching over an explicit partition.
///
/// Every token of A takes its best B target (lowest B index on ties), the
/// edges are ranked by score with lower source index first on ties, and the
/// top `r` finite-score edges are kept. Protected and inert tokens never
/// take part. The work done is one scoring pass and one sort whatever `r`
/// is.
pub fn bipartite_soft_matching_with<T: Scalar>(
    sim: &SimilarityInput<T>,
    r: usize,
    partition: &Partition,
) -> Result<MergePlan> {
    let n = sim.len();
    if r == 0 || n < 2 {
        return Ok(MergePlan::identity(n, r));
    }
    partition.validate(n)?;
    let targets: Vec<usize> = partition
        .set_b
        .iter()
        .copied()
        .filter(|&b| sim.is_mergeable(b))
        .collect();

    let best: Vec<(T, usize)> = partition
        .set_a
        .par_iter()
        .map(|&a| best_target(sim, a, &targets))
        .collect();
    #[cfg(test)]
    probe::SCORE_PASSES.with(|c| c.set(c.get() + 1));

    let mut order: Vec<usize> = (0..partition.set_a.len()).collect();
    order.sort_by(|&i, &j| cmp_desc(best[i].0, best[j].0));
    #[cfg(test)]
    probe::SORTS.with(|c| c.set(c.get() + 1));

    let edges: Vec<Edge> = order
        .iter()
        .take_while(|&&i| best[i].0.is_finite())
        .take(r)
        .map(|&i| Edge {
            src: partition.set_a[i],
            dst: best[i].1,
        })
        .collect();
    MergePlan::from_edges(n, r, partition, edges)
}

fn best_target<T: Scalar>(sim: &SimilarityInput<T>, a: usize, targets: &[usize]) -> (T, usize) {
    let mut best = (T::neg_infinity(), usize::MAX);
    if !sim.is_mergeable(a) || targets.is_empty() {
        return best;
    }
    if sim.metric() == Metric::SoftmaxSim {
        let row = sim.score_row(a, targets);
        for (&s, &b) in row.iter().zip(targets) {
            if s > best.0 {
                best = (s, b);
            }
        }
        return best;
    }
    for &b in targets {
        let s = sim.pair_score(a, b);
        if s > best.0 {
            best = (s, b);
        }
    }
    best
}

/// Descending order for scores; -inf sorts last. Callers rely on a stable
/// sort to keep ties in index order.
fn cmp_desc<T: Scalar>(x: T, y: T) -> Ordering {
    y.partial_cmp(&x).unwrap_or(Ordering::Equal)
}

/// Greedy matching with the alternating split.
pub fn greedy_matching<T: Scalar>(sim: &SimilarityInput<T>, r: usize) -> Result<MergePlan> {
    if r == 0 || sim.len() < 2 {
        return Ok(MergePlan::identity(sim.len(), r));
    }
    greedy_matching_with(sim, r, &partition_alternating(sim.len())?)
}

/// Sequential reference matcher: `r` times, take the most similar remaining
/// (A, B) pair and retire both tokens. Ties prefer the lower A index, then
/// the lower B index.
pub fn greedy_matching_with<T: Scalar>(
    sim: &SimilarityInput<T>,
    r: usize,
    partition: &Partition,
) -> Result<MergePlan> {
    let n = sim.len();
    if r == 0 || n < 2 {
        return Ok(MergePlan::identity(n, r));
    }
    partition.validate(n)?;
    let scores: Vec<Vec<T>> = partition
        .set_a
        .iter()
        .map(|&a| sim.score_row(a, &partition.set_b))
        .collect();
    let mut used_a = vec![false; partition.set_a.len()];
    let mut used_b = vec![false; partition.set_b.len()];
    let mut edges = Vec::new();
    while edges.len() < r {
        let mut best: Option<(T, usize, usize)> = None;
        for (i, row) in scores.iter().enumerate() {
            if used_a[i] {
                continue;
            }
            for (j, &s) in row.iter().enumerate() {
                if used_b[j] || !s.is_finite() {
                    continue;
                }
                if best.is_none_or(|(bs, _, _)| s > bs) {
                    best = Some((s, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        used_a[i] = true;
        used_b[j] = true;
        edges.push(Edge {
            src: partition.set_a[i],
            dst: partition.set_b[j],
        });
    }
    MergePlan::from_edges(n, r, partition, edges)
}

/// Drops `r` uniformly chosen unprotected tokens.
pub fn random_prune(n: usize, r: usize, protected: &[usize], seed: u64) -> Result<PrunePlan> {
    if let Some(&p) = protected.iter().find(|&&p| p >= n) {
        return invalid(format!("protected index {p} out of range for {n} tokens"));
    }
    let candidates: Vec<usize> = (0..n).filter(|i| !protected.contains(i)).collect();
    if r > candidates.len() {
        return invalid(format!(
            "cannot prune {r} of {} unprotected tokens",
            candidates.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut removed = vec![false; n];
    for k in rand::seq::index::sample(&mut rng, candidates.len(), r) {
        removed[candidates[k]] = true;
    }
    Ok(PrunePlan {
        n_in: n,
        kept: (0..n).filter(|&i| !removed[i]).collect(),
    })
}
