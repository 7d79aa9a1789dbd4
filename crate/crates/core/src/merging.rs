//! Applying merge and prune plans to the token state.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matching::{MergePlan, PrunePlan};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Size-weighted mean.
    #[default]
    WeightedAvg,
    Avg,
    Max,
    /// The destination keeps its own features.
    KeepOne,
}

/// Everything a block carries per token: features, how many patches each
/// token stands for, and which original tokens it came from.
///
/// Source ids are original token indices: 0 is the class token and patch
/// `p` (row-major over the grid) is `p + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenState<T> {
    pub features: Matrix<T>,
    pub sizes: Vec<u32>,
    /// Ascending source ids per token.
    pub sources: Vec<Vec<u32>>,
}

impl<T: Scalar> TokenState<T> {
    /// Fresh state: every token has size 1 and is its own source.
    pub fn new(features: Matrix<T>) -> Self {
        let n = features.rows();
        Self {
            features,
            sizes: vec![1; n],
            sources: (0..n as u32).map(|i| vec![i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn total_size(&self) -> u64 {
        self.sizes.iter().map(|&s| s as u64).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.sizes.len() != n || self.sources.len() != n {
            return invalid(format!(
                "token state has {n} rows, {} sizes and {} source sets",
                self.sizes.len(),
                self.sources.len()
            ));
        }
        if self.sizes.contains(&0) {
            return invalid("token sizes must be positive");
        }
        Ok(())
    }

    /// Checks that `sources` is an exact partition of `0..universe`.
    pub fn sources_partition(&self, universe: usize) -> bool {
        let mut seen = vec![false; universe];
        for set in &self.sources {
            for &s in set {
                let s = s as usize;
                if s >= universe || seen[s] {
                    return false;
                }
                seen[s] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Folds every source token into its destination and reorders the tokens
/// as the plan says.
///
/// Sizes add and source sets union in every mode. Within a group the
/// destination is accumulated first, then the sources in ascending index
/// order.
pub fn apply_merge<T: Scalar>(
    state: &TokenState<T>,
    plan: &MergePlan,
    mode: CombineMode,
) -> Result<TokenState<T>> {
    state.validate()?;
    if plan.n_in() != state.len() {
        return invalid(format!(
            "plan expects {} tokens, state has {}",
            plan.n_in(),
            state.len()
        ));
    }
    if plan.is_identity() {
        return Ok(state.clone());
    }
    let c = state.features.cols();
    let groups = plan.output_order();
    let mut features = Matrix::zeros(groups.len(), c);
    let mut sizes = Vec::with_capacity(groups.len());
    let mut sources = Vec::with_capacity(groups.len());
    for (out, group) in groups.iter().enumerate() {
        let members = || std::iter::once(group.dst).chain(group.srcs.iter().copied());
        let size: u32 = members().map(|i| state.sizes[i]).sum();
        let row = features.row_mut(out);
        let dst = state.features.row(group.dst);
        if group.srcs.is_empty() || mode == CombineMode::KeepOne {
            row.copy_from_slice(dst);
        } else {
            match mode {
                CombineMode::WeightedAvg => {
                    for i in members() {
                        let w = T::from_u32(state.sizes[i]).expect("size fits in a float");
                        for (o, &x) in row.iter_mut().zip(state.features.row(i)) {
                            *o += w * x;
                        }
                    }
                    let total = T::from_u32(size).expect("size fits in a float");
                    row.iter_mut().for_each(|o| *o /= total);
                }
                CombineMode::Avg => {
                    for i in members() {
                        for (o, &x) in row.iter_mut().zip(state.features.row(i)) {
                            *o += x;
                        }
                    }
                    let k = T::of_usize(group.srcs.len() + 1);
                    row.iter_mut().for_each(|o| *o /= k);
                }
                CombineMode::Max => {
                    row.copy_from_slice(dst);
                    for &i in &group.srcs {
                        for (o, &x) in row.iter_mut().zip(state.features.row(i)) {
                            *o = o.max(x);
                        }
                    }
                }
                CombineMode::KeepOne => unreachable!(),
            }
        }
        let mut src: Vec<u32> = members().flat_map(|i| state.sources[i].iter().copied()).collect();
        src.sort_unstable();
        sizes.push(size);
        sources.push(src);
    }
    Ok(TokenState {
        features,
        sizes,
        sources,
    })
}

/// Keeps only the listed rows. Dropped tokens take their size and sources
/// with them.
pub fn apply_prune<T: Scalar>(state: &TokenState<T>, plan: &PrunePlan) -> Result<TokenState<T>> {
    state.validate()?;
    let n = state.len();
    if plan.n_in != n {
        return invalid(format!("prune plan expects {} tokens, state has {n}", plan.n_in));
    }
    if let Some(&i) = plan.kept.iter().find(|&&i| i >= n) {
        return invalid(format!("kept index {i} out of range for {n} tokens"));
    }
    if plan.kept.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("kept indices must be strictly ascending");
    }
    Ok(TokenState {
        features: state.features.select_rows(&plan.kept),
        sizes: plan.kept.iter().map(|&i| state.sizes[i]).collect(),
        sources: plan.kept.iter().map(|&i| state.sources[i].clone()).collect(),
    })
}
