//! Multi-head self-attention with proportional attention.
//!
//! With proportional attention each key gets an additive logit bias of
//! `ln(size)`, so a merged token of size `s` pulls as much attention as `s`
//! identical copies of it would.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, linear, softmax_inplace, HeadTensor, Matrix};

/// Per-head queries, keys and values plus the size of every key token.
/// Keys, values and sizes share a token count; queries may differ.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs<T> {
    pub q: HeadTensor<T>,
    pub k: HeadTensor<T>,
    pub v: HeadTensor<T>,
    pub sizes: Vec<u32>,
}

impl<T: Scalar> AttentionInputs<T> {
    pub fn d_head(&self) -> usize {
        self.q.dim()
    }

    fn validate(&self) -> Result<()> {
        let (q, k, v) = (&self.q, &self.k, &self.v);
        if q.heads() != k.heads() || k.heads() != v.heads() {
            return invalid("q, k and v must have the same number of heads");
        }
        if q.dim() != k.dim() {
            return invalid("queries and keys must share a head dimension");
        }
        if k.tokens() != v.tokens() || k.tokens() != self.sizes.len() {
            return invalid(format!(
                "{} keys, {} values and {} sizes",
                k.tokens(),
                v.tokens(),
                self.sizes.len()
            ));
        }
        if self.sizes.contains(&0) {
            return invalid("token sizes must be positive for proportional attention");
        }
        Ok(())
    }
}

pub struct AttentionOutput<'a, T> {
    /// `[heads × queries × d_value]`.
    pub output: HeadTensor<T>,
    /// The keys that were attended to, for similarity scoring downstream.
    pub keys: &'a HeadTensor<T>,
}

/// Row-softmax attention weights for one head, `[queries × keys]`.
pub fn attention_weights<T: Scalar>(
    q: &[T],
    k: &[T],
    d: usize,
    log_sizes: Option<&[T]>,
) -> Vec<T> {
    let (nq, nk) = (q.len() / d, k.len() / d);
    let scale = T::one() / T::of_usize(d).sqrt();
    let mut weights = vec![T::zero(); nq * nk];
    for i in 0..nq {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut weights[i * nk..(i + 1) * nk];
        for (j, w) in row.iter_mut().enumerate() {
            *w = dot(qi, &k[j * d..(j + 1) * d]) * scale;
        }
        if let Some(bias) = log_sizes {
            for (w, &b) in row.iter_mut().zip(bias) {
                *w += b;
            }
        }
        softmax_inplace(row);
    }
    weights
}

/// `softmax(QKᵀ/√d + ln s)·V` per head (plain scaled dot-product attention
/// when `use_prop` is false).
pub fn proportional_attention<T: Scalar>(
    inputs: &AttentionInputs<T>,
    use_prop: bool,
) -> Result<AttentionOutput<'_, T>> {
    inputs.validate()?;
    let (heads, nq, nk) = (inputs.q.heads(), inputs.q.tokens(), inputs.k.tokens());
    let (d, dv) = (inputs.d_head(), inputs.v.dim());
    let log_sizes: Option<Vec<T>> = use_prop.then(|| {
        inputs
            .sizes
            .iter()
            .map(|&s| T::from_u32(s).expect("size fits in a float").ln())
            .collect()
    });
    let mut output = HeadTensor::zeros(heads, nq, dv);
    for h in 0..heads {
        let weights = attention_weights(inputs.q.head(h), inputs.k.head(h), d, log_sizes.as_deref());
        let v = inputs.v.head(h);
        let out = output.head_mut(h);
        for i in 0..nq {
            let orow = &mut out[i * dv..(i + 1) * dv];
            for j in 0..nk {
                let w = weights[i * nk + j];
                for (o, &x) in orow.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                    *o += w * x;
                }
            }
        }
    }
    Ok(AttentionOutput {
        output,
        keys: &inputs.k,
    })
}

/// Splits `x · W_qkv + b` into per-head Q, K and V. The fused weight is
/// `[C × 3C]` with output columns ordered Q, K, V; head `h` owns channels
/// `h·d .. (h+1)·d` of each.
pub fn qkv_project<T: Scalar>(
    x: &Matrix<T>,
    weight: &[T],
    bias: &[T],
    heads: usize,
    sizes: &[u32],
) -> Result<AttentionInputs<T>> {
    let c = x.cols();
    if heads == 0 || !c.is_multiple_of(heads) {
        return invalid(format!("width {c} is not divisible by {heads} heads"));
    }
    if sizes.len() != x.rows() {
        return invalid(format!("{} tokens but {} sizes", x.rows(), sizes.len()));
    }
    let qkv = linear(x, weight, bias, 3 * c)?;
    let (n, d) = (x.rows(), c / heads);
    let mut parts = [
        HeadTensor::zeros(heads, n, d),
        HeadTensor::zeros(heads, n, d),
        HeadTensor::zeros(heads, n, d),
    ];
    for t in 0..n {
        let row = qkv.row(t);
        for (p, part) in parts.iter_mut().enumerate() {
            for h in 0..heads {
                let start = p * c + h * d;
                part.row_mut(h, t).copy_from_slice(&row[start..start + d]);
            }
        }
    }
    let [q, k, v] = parts;
    Ok(AttentionInputs {
        q,
        k,
        v,
        sizes: sizes.to_vec(),
    })
}

/// Concatenates heads back to `[tokens × C]` and applies `W_proj`, `b_proj`.
pub fn output_project<T: Scalar>(attn: &HeadTensor<T>, weight: &[T], bias: &[T]) -> Result<Matrix<T>> {
    let (heads, n, d) = (attn.heads(), attn.tokens(), attn.dim());
    let c = heads * d;
    let mut merged = Matrix::zeros(n, c);
    for t in 0..n {
        let row = merged.row_mut(t);
        for h in 0..heads {
            row[h * d..(h + 1) * d].copy_from_slice(attn.row(h, t));
        }
    }
    linear(&merged, weight, bias, c)
}
