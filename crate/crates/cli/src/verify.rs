//! Self-check suites run by `tome verify`: each compares the engine
//! against an independent brute-force evaluation or checks an exact
//! invariant on random instances.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tome_core::attention::{proportional_attention, AttentionInputs};
use tome_core::matching::{bipartite_soft_matching, Metric, SimilarityInput};
use tome_core::merging::{apply_merge, CombineMode, TokenState};
use tome_core::schedule::{constant_schedule, decreasing_schedule};
use tome_core::tensor::{HeadTensor, Matrix};
use tome_core::vit::{init_weights, model_forward_inspect, ModelConfig, ToMeConfig};

use crate::bench::random_images;

pub const ATTENTION_REL_TOL: f64 = 1e-6;

/// Deliberate breakage for exercising the failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Every merged state loses one unit of size before it is checked.
    Conservation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub first_failure: Option<String>,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.suites.iter().all(SuiteReport::ok)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed {}", self.seed)?;
        for s in &self.suites {
            let status = if s.ok() { "PASS" } else { "FAIL" };
            writeln!(f, "{status} {}: {}/{} cases", s.name, s.passed, s.total)?;
            if let Some(msg) = &s.first_failure {
                writeln!(f, "  first failure: {msg}")?;
            }
        }
        let failed = self.suites.iter().filter(|s| !s.ok()).count();
        if failed == 0 {
            writeln!(f, "all {} suites passed", self.suites.len())
        } else {
            writeln!(f, "{failed} of {} suites failed", self.suites.len())
        }
    }
}

fn suite(name: &'static str, cases: usize, mut case: impl FnMut(usize) -> Result<(), String>) -> SuiteReport {
    let mut passed = 0;
    let mut first_failure = None;
    for i in 0..cases {
        match case(i) {
            Ok(()) => passed += 1,
            Err(msg) => {
                first_failure.get_or_insert_with(|| format!("case {i}: {msg}"));
            }
        }
    }
    SuiteReport {
        name,
        passed,
        total: cases,
        first_failure,
    }
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

/// Brute-force bipartite matching over the alternating split with the class
/// token protected: score every pair, take each A token's best B token
/// (lowest index on ties), sort by score (lowest source index on ties),
/// keep the top `r` finite edges.
pub fn brute_force_matching(rows: &[Vec<f64>], metric: Metric, r: usize) -> Vec<(usize, usize)> {
    let n = rows.len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let score = |a: usize, b: usize| -> f64 {
        let (x, y) = (&rows[a], &rows[b]);
        match metric {
            Metric::Cosine => {
                let (nx, ny) = (norm(x), norm(y));
                if nx < 1e-12 || ny < 1e-12 {
                    return f64::NEG_INFINITY;
                }
                x.iter().zip(y).map(|(p, q)| (p / nx) * (q / ny)).sum()
            }
            Metric::Dot => x.iter().zip(y).map(|(p, q)| p * q).sum(),
            Metric::Euclidean => -x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>(),
            Metric::SoftmaxSim => unimplemented!("softmax similarity has no reference"),
        }
    };
    let mut edges = Vec::new();
    for a in (2..n).step_by(2) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for b in (1..n).step_by(2) {
            let s = score(a, b);
            if s > best.0 {
                best = (s, b);
            }
        }
        if best.0.is_finite() {
            edges.push((best.0, a, best.1));
        }
    }
    edges.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    edges.into_iter().take(r).map(|(_, a, b)| (a, b)).collect()
}

/// Plain softmax attention for one head where key/value row `j` is repeated
/// `sizes[j]` times.
pub fn expanded_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], sizes: &[u32]) -> Vec<Vec<f64>> {
    let mut ke = Vec::new();
    let mut ve = Vec::new();
    for (j, &s) in sizes.iter().enumerate() {
        for _ in 0..s {
            ke.push(&k[j]);
            ve.push(&v[j]);
        }
    }
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = ke
                .iter()
                .map(|kj| qi.iter().zip(kj.iter()).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|t| e.iter().zip(&ve).map(|(w, vj)| w / z * vj[t]).sum())
                .collect()
        })
        .collect()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) + 1e-12
}

/// Exact size and provenance bookkeeping: sizes sum to `universe`, each
/// token's size equals its source count, and sources partition
/// `0..universe`.
pub fn check_conservation<T: tome_core::Scalar>(
    state: &TokenState<T>,
    universe: usize,
    fault: Option<Fault>,
) -> Result<(), String> {
    let mut sizes = state.sizes.clone();
    if fault == Some(Fault::Conservation) {
        if let Some(s) = sizes.iter_mut().find(|s| **s > 1) {
            *s -= 1;
        } else if let Some(s) = sizes.last_mut() {
            *s = s.saturating_sub(1);
        }
    }
    let total: u64 = sizes.iter().map(|&s| s as u64).sum();
    if total != universe as u64 {
        return Err(format!("conservation violated: sum(sizes) = {total}, expected {universe}"));
    }
    for (i, (s, src)) in sizes.iter().zip(&state.sources).enumerate() {
        if *s as usize != src.len() {
            return Err(format!("conservation violated: token {i} has size {s} but {} sources", src.len()));
        }
    }
    if !state.sources_partition(universe) {
        return Err("conservation violated: sources do not partition the original tokens".into());
    }
    Ok(())
}

pub fn matching_suite(rng: &mut ChaCha8Rng, cases: usize) -> SuiteReport {
    suite("matching-oracle", cases, |_| {
        let n = rng.gen_range(2..=16);
        let c = rng.gen_range(1..=4);
        let r = rng.gen_range(0..=n);
        let metric = [Metric::Cosine, Metric::Dot, Metric::Euclidean][rng.gen_range(0..3)];
        let rows = random_rows(rng, n, c);
        let sim = SimilarityInput::new(Matrix::from_rows(&rows).unwrap(), &[0], metric).map_err(|e| e.to_string())?;
        let plan = bipartite_soft_matching(&sim, r).map_err(|e| e.to_string())?;
        let got: Vec<(usize, usize)> = plan.edges().iter().map(|e| (e.src, e.dst)).collect();
        let want = brute_force_matching(&rows, metric, r);
        if got == want {
            Ok(())
        } else {
            Err(format!("n={n} r={r} {metric:?}: plan {got:?}, oracle {want:?}"))
        }
    })
}

pub fn attention_suite(rng: &mut ChaCha8Rng, cases: usize) -> SuiteReport {
    suite("attention-duplicate-keys", cases, |_| {
        let heads = rng.gen_range(1..=2);
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=4);
        let sizes: Vec<u32> = (0..n).map(|_| rng.gen_range(1..=4)).collect();
        let per_head: Vec<[Vec<Vec<f64>>; 3]> = (0..heads)
            .map(|_| [random_rows(rng, n, d), random_rows(rng, n, d), random_rows(rng, n, d)])
            .collect();
        let pack = |k: usize| {
            let data: Vec<f64> = per_head.iter().flat_map(|h| h[k].concat()).collect();
            HeadTensor::from_vec(heads, n, d, data).unwrap()
        };
        let inputs = AttentionInputs { q: pack(0), k: pack(1), v: pack(2), sizes: sizes.clone() };
        let out = proportional_attention(&inputs, true).map_err(|e| e.to_string())?;
        for (h, [q, k, v]) in per_head.iter().enumerate() {
            let want = expanded_attention(q, k, v, &sizes);
            for (i, row) in want.iter().enumerate() {
                for (t, &w) in row.iter().enumerate() {
                    let got = out.output.row(h, i)[t];
                    if !rel_close(got, w, ATTENTION_REL_TOL) {
                        return Err(format!("head {h} row {i} ch {t}: {got} vs expanded {w}"));
                    }
                }
            }
        }
        Ok(())
    })
}

pub fn merge_conservation_suite(rng: &mut ChaCha8Rng, cases: usize, fault: Option<Fault>) -> SuiteReport {
    let modes = [CombineMode::WeightedAvg, CombineMode::Avg, CombineMode::Max, CombineMode::KeepOne];
    suite("conservation-merge", cases, |_| {
        let n = rng.gen_range(2..=24);
        let c = rng.gen_range(1..=4);
        let rows = random_rows(rng, n, c);
        let sizes: Vec<u32> = (0..n).map(|_| rng.gen_range(1..=5)).collect();
        let mut next = 0u32;
        let sources = sizes
            .iter()
            .map(|&s| {
                let v: Vec<u32> = (next..next + s).collect();
                next += s;
                v
            })
            .collect();
        let state = TokenState { features: Matrix::from_rows(&rows).unwrap(), sizes, sources };
        let sim = SimilarityInput::new(state.features.clone(), &[0], Metric::Cosine).map_err(|e| e.to_string())?;
        let plan = bipartite_soft_matching(&sim, rng.gen_range(0..=n)).map_err(|e| e.to_string())?;
        let mode = modes[rng.gen_range(0..modes.len())];
        let out = apply_merge(&state, &plan, mode).map_err(|e| e.to_string())?;
        if out.len() != n - plan.r_effective() {
            return Err(format!("{} tokens out, expected {}", out.len(), n - plan.r_effective()));
        }
        check_conservation(&out, next as usize, fault)
    })
}

pub fn forward_conservation_suite(rng: &mut ChaCha8Rng, cases: usize, fault: Option<Fault>) -> SuiteReport {
    let modes = [CombineMode::WeightedAvg, CombineMode::Avg, CombineMode::Max, CombineMode::KeepOne];
    suite("conservation-forward", cases, |i| {
        let depth = rng.gen_range(2..=4);
        let r = rng.gen_range(1..=6);
        let schedule = if (i / modes.len()).is_multiple_of(2) { constant_schedule(r, depth) } else { decreasing_schedule(r, depth) }
            .map_err(|e| e.to_string())?;
        let mut tome = ToMeConfig::with_schedule(schedule);
        tome.combine = modes[i % modes.len()];
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 4,
            channels_in: 3,
            width: 8,
            depth,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            tome,
        };
        let weights = init_weights::<f32>(&cfg, rng.gen());
        let image = random_images(&cfg, 1, rng.gen()).remove(0);
        let universe = cfg.num_tokens();
        let mut failure = None;
        model_forward_inspect(&image, &cfg, &weights, &mut |layer, state| {
            if failure.is_none() {
                if let Err(e) = check_conservation(state, universe, fault) {
                    failure = Some(format!("block {layer}: {e}"));
                }
            }
        })
        .map_err(|e| e.to_string())?;
        failure.map_or(Ok(()), Err)
    })
}

/// Runs every suite with `cases` random instances each (the forward-pass
/// suite runs a tenth as many, at least one).
pub fn run_verify(seed: u64, cases: usize, fault: Option<Fault>) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let suites = vec![
        matching_suite(&mut rng, cases),
        attention_suite(&mut rng, cases),
        merge_conservation_suite(&mut rng, cases, fault),
        forward_conservation_suite(&mut rng, (cases / 10).max(1), fault),
    ];
    VerifyReport { seed, suites }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_build_passes() {
        let report = run_verify(1, 60, None);
        assert!(report.ok(), "{report}");
    }

    #[test]
    fn injected_fault_names_the_invariant() {
        let report = run_verify(1, 20, Some(Fault::Conservation));
        assert!(!report.ok());
        let text = report.to_string();
        assert!(text.contains("FAIL conservation-merge"), "{text}");
        assert!(text.contains("conservation violated"), "{text}");
        assert!(text.contains("PASS matching-oracle"), "{text}");
    }

    #[test]
    fn report_is_deterministic() {
        assert_eq!(run_verify(7, 40, None).to_string(), run_verify(7, 40, None).to_string());
    }
}
