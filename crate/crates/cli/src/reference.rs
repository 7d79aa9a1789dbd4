//! A plain ViT forward pass with no token reduction, written directly
//! against the named weight tensors on nested `Vec`s. It shares no code
//! with the engine's forward pass but keeps the same floating-point
//! operation order, so a zero schedule must reproduce its logits bit for
//! bit.

use tome_core::vit::{Image, ModelConfig, ModelWeights};
use tome_core::Result;

type Rows = Vec<Vec<f32>>;

fn affine(x: &Rows, w: &[f32], b: &[f32]) -> Rows {
    let out = b.len();
    x.iter()
        .map(|xi| {
            let mut y = vec![0f32; out];
            for (k, &xk) in xi.iter().enumerate() {
                for j in 0..out {
                    y[j] += xk * w[k * out + j];
                }
            }
            for j in 0..out {
                y[j] += b[j];
            }
            y
        })
        .collect()
}

fn norm(x: &Rows, g: &[f32], b: &[f32]) -> Rows {
    x.iter()
        .map(|xi| {
            let n = xi.len() as f32;
            let mean = xi.iter().sum::<f32>() / n;
            let mut var = 0f32;
            for &v in xi {
                var += (v - mean) * (v - mean);
            }
            let inv = 1.0 / (var / n + 1e-6f32).sqrt();
            xi.iter().enumerate().map(|(j, &v)| (v - mean) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

fn plus(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

#[allow(clippy::needless_range_loop)]
fn self_attention(x: &Rows, heads: usize, wqkv: &[f32], bqkv: &[f32], wo: &[f32], bo: &[f32]) -> Rows {
    let n = x.len();
    let c = x[0].len();
    let d = c / heads;
    let qkv = affine(x, wqkv, bqkv);
    let scale = 1.0 / (d as f32).sqrt();
    let mut concat = vec![vec![0f32; c]; n];
    for h in 0..heads {
        let q = |t: usize| &qkv[t][h * d..(h + 1) * d];
        let k = |t: usize| &qkv[t][c + h * d..c + (h + 1) * d];
        let v = |t: usize| &qkv[t][2 * c + h * d..2 * c + (h + 1) * d];
        for i in 0..n {
            let mut logits: Vec<f32> = (0..n)
                .map(|j| {
                    let mut s = 0f32;
                    for (a, b) in q(i).iter().zip(k(j)) {
                        s += a * b;
                    }
                    s * scale
                })
                .collect();
            let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0f32;
            for l in logits.iter_mut() {
                *l = (*l - m).exp();
                z += *l;
            }
            let out = &mut concat[i][h * d..(h + 1) * d];
            for (j, l) in logits.iter().enumerate() {
                let p = l / z;
                for (o, vv) in out.iter_mut().zip(v(j)) {
                    *o += p * vv;
                }
            }
        }
    }
    affine(&concat, wo, bo)
}

fn gelu(u: f32) -> f32 {
    let c = (2.0 / std::f64::consts::PI).sqrt() as f32;
    0.5 * u * (1.0 + (c * (u + 0.044715 * u * u * u)).tanh())
}

/// Logits of the unmodified model.
pub fn reference_forward(image: &Image<f32>, cfg: &ModelConfig, weights: &ModelWeights<f32>) -> Result<Vec<f32>> {
    let w = |name: &str| weights.data(name);
    let (p, g) = (cfg.patch_size, cfg.grid());
    let mut patches = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let mut flat = Vec::with_capacity(cfg.patch_dim());
            for ch in 0..image.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        flat.push(image.data[(ch * image.height + gy * p + dy) * image.width + gx * p + dx]);
                    }
                }
            }
            patches.push(flat);
        }
    }
    let embedded = affine(&patches, w("patch_embed.weight")?, w("patch_embed.bias")?);
    let pos = w("pos_embed")?;
    let c = cfg.width;
    let mut x: Rows = std::iter::once(w("cls_token")?.to_vec()).chain(embedded).collect();
    for (t, row) in x.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += pos[t * c + j];
        }
    }
    for i in 0..cfg.depth {
        let b = |s: &str| w(&format!("blocks.{i}.{s}"));
        let h = norm(&x, b("norm1.weight")?, b("norm1.bias")?);
        let a = self_attention(
            &h,
            cfg.heads,
            b("attn.qkv.weight")?,
            b("attn.qkv.bias")?,
            b("attn.proj.weight")?,
            b("attn.proj.bias")?,
        );
        x = plus(&a, &x);
        let h = norm(&x, b("norm2.weight")?, b("norm2.bias")?);
        let mut hidden = affine(&h, b("mlp.fc1.weight")?, b("mlp.fc1.bias")?);
        hidden.iter_mut().flatten().for_each(|v| *v = gelu(*v));
        let m = affine(&hidden, b("mlp.fc2.weight")?, b("mlp.fc2.bias")?);
        x = plus(&m, &x);
    }
    let cls = norm(&x[..1].to_vec(), w("norm.weight")?, w("norm.bias")?);
    Ok(affine(&cls, w("head.weight")?, w("head.bias")?).remove(0))
}
