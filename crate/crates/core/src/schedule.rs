//! Per-layer merge schedules and the analytic cost model used to compare
//! them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::vit::ModelConfig;

/// Tokens to remove in each block. Serializes as a plain JSON array.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    pub per_layer: Vec<usize>,
}

impl Schedule {
    pub fn new(per_layer: Vec<usize>) -> Self {
        Self { per_layer }
    }

    pub fn zeros(depth: usize) -> Self {
        Self::new(vec![0; depth])
    }

    pub fn total(&self) -> usize {
        self.per_layer.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    /// Per-layer removals after clamping to what a model starting at
    /// `tokens` tokens can actually merge (one protected class token, the
    /// larger half of an even/odd split as set A).
    pub fn effective(&self, tokens: usize) -> Vec<usize> {
        let mut n = tokens;
        self.per_layer
            .iter()
            .map(|&r| {
                let r = r.min(mergeable(n));
                n -= r;
                r
            })
            .collect()
    }
}

/// Most merges one block can do on `n` tokens with the class token
/// protected.
pub fn mergeable(n: usize) -> usize {
    n.saturating_sub(1) / 2
}

/// `r` tokens in every block.
pub fn constant_schedule(r: usize, depth: usize) -> Result<Schedule> {
    if depth == 0 {
        return invalid("schedule depth must be at least 1");
    }
    Ok(Schedule::new(vec![r; depth]))
}

/// Linear ramp from `2r` in the first block to 0 in the last, with the same
/// total `r·depth` as the constant schedule.
///
/// The real-valued ramp is floored, then the leftover units go one each to
/// the layers with the largest fractional parts (earlier layer on ties).
/// All arithmetic is on integers.
pub fn decreasing_schedule(r: usize, depth: usize) -> Result<Schedule> {
    if depth < 2 {
        return invalid("a decreasing schedule needs at least 2 layers");
    }
    let span = depth - 1;
    let mut per_layer = Vec::with_capacity(depth);
    let mut fractions = Vec::with_capacity(depth);
    for i in 0..depth {
        let num = 2 * r * (span - i);
        per_layer.push(num / span);
        fractions.push((num % span, i));
    }
    let leftover = r * depth - per_layer.iter().sum::<usize>();
    fractions.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in fractions.iter().take(leftover) {
        per_layer[i] += 1;
    }
    Ok(Schedule::new(per_layer))
}

/// Drops each of `total` units into a uniformly chosen layer.
pub fn sample_random_schedule(total: usize, depth: usize, seed: u64) -> Result<Schedule> {
    if depth == 0 {
        return invalid("schedule depth must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_layer = vec![0; depth];
    for _ in 0..total {
        per_layer[rng.gen_range(0..depth)] += 1;
    }
    Ok(Schedule::new(per_layer))
}

/// Analytic cost of one forward pass, in flops.
///
/// With `C` the width, `P` the flattened patch length, `ρ` the MLP ratio and
/// `K` the class count:
///
/// * patch embedding: `2 · patches · P · C`
/// * each block, entering with `n` tokens and leaving the merge with `m`:
///   attention `4nC² + 2n²C`, MLP `2·ρ·m·C²·2`
/// * classifier: `2 · C · K`
///
/// Token counts follow the schedule after clamping (see
/// [`Schedule::effective`]).
pub fn flop_estimate(cfg: &ModelConfig, schedule: &Schedule) -> u64 {
    let c = cfg.width as u64;
    let ratio = cfg.mlp_ratio as u64;
    let patches = cfg.num_patches() as u64;
    let mut flops = 2 * patches * cfg.patch_dim() as u64 * c;
    let mut n = cfg.num_tokens();
    for r in schedule.effective(cfg.num_tokens()) {
        let nn = n as u64;
        flops += 4 * nn * c * c + 2 * nn * nn * c;
        n -= r;
        flops += 2 * ratio * n as u64 * c * c * 2;
    }
    flops + 2 * c * cfg.num_classes as u64
}

/// Command-line schedule descriptor: `const:8`, `dec:8` or `list:4,3,1,0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleSpec {
    Constant(usize),
    Decreasing(usize),
    List(Vec<usize>),
}

impl ScheduleSpec {
    pub fn resolve(&self, depth: usize) -> Result<Schedule> {
        match self {
            Self::Constant(r) => constant_schedule(*r, depth),
            Self::Decreasing(r) => decreasing_schedule(*r, depth),
            Self::List(v) if v.len() == depth => Ok(Schedule::new(v.clone())),
            Self::List(v) => invalid(format!("schedule has {} entries for {depth} layers", v.len())),
        }
    }

    /// The per-layer `r` for the parametric families.
    pub fn r(&self) -> Option<usize> {
        match self {
            Self::Constant(r) | Self::Decreasing(r) => Some(*r),
            Self::List(_) => None,
        }
    }
}

impl FromStr for ScheduleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad schedule `{s}` (expected const:R, dec:R or list:A,B,..)"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        match kind {
            "const" => Ok(Self::Constant(num(arg)?)),
            "dec" => Ok(Self::Decreasing(num(arg)?)),
            "list" => Ok(Self::List(arg.split(',').map(num).collect::<Result<_>>()?)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(r) => write!(f, "const:{r}"),
            Self::Decreasing(r) => write!(f, "dec:{r}"),
            Self::List(v) => {
                let parts: Vec<String> = v.iter().map(usize::to_string).collect();
                write!(f, "list:{}", parts.join(","))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ToMeConfig;

    fn toy(depth: usize, width: usize) -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels_in: 3,
            width,
            depth,
            heads: 2,
            mlp_ratio: 4,
            num_classes: 10,
            tome: ToMeConfig::with_schedule(Schedule::zeros(depth)),
        }
    }

    #[test]
    fn constant_totals() {
        assert_eq!(constant_schedule(8, 24).unwrap().total(), 192);
        assert_eq!(constant_schedule(16, 12).unwrap().total(), 192);
        assert_eq!(constant_schedule(0, 5).unwrap(), Schedule::zeros(5));
        assert!(constant_schedule(1, 0).is_err());
    }

    #[test]
    fn decreasing_examples() {
        let s = decreasing_schedule(8, 24).unwrap();
        assert_eq!((s.total(), s.per_layer[0], s.per_layer[23]), (192, 16, 0));
        assert_eq!(decreasing_schedule(2, 4).unwrap().per_layer, vec![4, 3, 1, 0]);
        assert_eq!(decreasing_schedule(0, 7).unwrap(), Schedule::zeros(7));
        assert!(decreasing_schedule(3, 1).is_err());
    }

    #[test]
    fn decreasing_is_total_exact_and_monotone() {
        for r in 0..=20 {
            for depth in 2..=40 {
                let s = decreasing_schedule(r, depth).unwrap();
                assert_eq!(s.total(), r * depth);
                assert!(s.per_layer.windows(2).all(|w| w[0] >= w[1]));
                assert!(s.per_layer[0] <= 2 * r);
                assert_eq!(s.per_layer[depth - 1], 0);
                assert_eq!(s.total(), constant_schedule(r, depth).unwrap().total());
            }
        }
    }

    #[test]
    fn random_schedule_contract() {
        assert_eq!(sample_random_schedule(0, 6, 1).unwrap(), Schedule::zeros(6));
        for seed in 0..50 {
            assert_eq!(sample_random_schedule(37, 5, seed).unwrap().total(), 37);
        }
        assert_eq!(sample_random_schedule(9, 3, 4).unwrap(), sample_random_schedule(9, 3, 4).unwrap());
    }

    #[test]
    fn random_schedule_means_match_multinomial() {
        let (total, depth, samples) = (24usize, 4usize, 1000usize);
        let mut sums = vec![0usize; depth];
        for seed in 0..samples as u64 {
            let s = sample_random_schedule(total, depth, seed).unwrap();
            for (acc, v) in sums.iter_mut().zip(&s.per_layer) {
                *acc += v;
            }
        }
        let p = 1.0 / depth as f64;
        let sigma = (total as f64 * p * (1.0 - p) / samples as f64).sqrt();
        for s in sums {
            let mean = s as f64 / samples as f64;
            assert!((mean - 6.0).abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
        }
    }

    #[test]
    fn descriptor_parsing() {
        assert_eq!("const:8".parse::<ScheduleSpec>().unwrap(), ScheduleSpec::Constant(8));
        assert_eq!("dec:3".parse::<ScheduleSpec>().unwrap(), ScheduleSpec::Decreasing(3));
        assert_eq!(
            "list:4,3,1,0".parse::<ScheduleSpec>().unwrap(),
            ScheduleSpec::List(vec![4, 3, 1, 0])
        );
        assert!("cosnt:8".parse::<ScheduleSpec>().is_err());
        assert!("list:1,x".parse::<ScheduleSpec>().is_err());
        assert!(ScheduleSpec::List(vec![1, 2]).resolve(3).is_err());
        assert_eq!(ScheduleSpec::List(vec![4, 3, 1, 0]).to_string(), "list:4,3,1,0");
    }

    #[test]
    fn schedule_json_is_an_array() {
        let s = Schedule::new(vec![4, 3, 1, 0]);
        assert_eq!(serde_json::to_string(&s).unwrap(), "[4,3,1,0]");
        assert_eq!(serde_json::from_str::<Schedule>("[4,3,1,0]").unwrap(), s);
    }

    #[test]
    fn single_block_flops_by_hand() {
        // 32px / 4px -> 64 patches, 65 tokens, P = 48, C = 8, K = 10
        let cfg = toy(1, 8);
        let s = Schedule::new(vec![5]);
        let embed = 2 * 64 * 48 * 8;
        let attn = 4 * 65 * 64 + 2 * 65 * 65 * 8;
        let mlp = 2 * 4 * 60 * 64 * 2;
        let head = 2 * 8 * 10;
        assert_eq!(flop_estimate(&cfg, &s), (embed + attn + mlp + head) as u64);
    }

    #[test]
    fn merging_reduces_flops() {
        let cfg = toy(6, 16);
        let base = flop_estimate(&cfg, &Schedule::zeros(6));
        assert!(flop_estimate(&cfg, &constant_schedule(2, 6).unwrap()) < base);
    }

    #[test]
    fn doubling_width_scales_between_two_and_four() {
        for depth in [1, 4, 12] {
            let s = constant_schedule(3, depth).unwrap();
            let a = flop_estimate(&toy(depth, 16), &s) as f64;
            let b = flop_estimate(&toy(depth, 32), &s) as f64;
            assert!(b / a > 2.0 && b / a <= 4.0, "{}", b / a);
        }
    }

    #[test]
    fn decreasing_beats_constant() {
        // a model big enough that neither schedule is clamped
        let mut cfg = toy(2, 16);
        cfg.image_size = 128;
        for depth in 2..=16 {
            cfg.depth = depth;
            for r in 1..=8 {
                let c = constant_schedule(r, depth).unwrap();
                let d = decreasing_schedule(r, depth).unwrap();
                assert_eq!(c.effective(cfg.num_tokens()), c.per_layer);
                assert_eq!(d.effective(cfg.num_tokens()), d.per_layer);
                assert!(flop_estimate(&cfg, &d) < flop_estimate(&cfg, &c), "r={r} L={depth}");
            }
        }
    }

    #[test]
    fn each_extra_merge_saves_flops() {
        let cfg = toy(5, 16);
        let base = Schedule::new(vec![3, 2, 2, 1, 0]);
        let f0 = flop_estimate(&cfg, &base);
        for i in 0..5 {
            let mut s = base.clone();
            s.per_layer[i] += 1;
            assert!(flop_estimate(&cfg, &s) < f0);
        }
    }

    #[test]
    fn clamping_matches_the_matcher() {
        // 197 tokens, constant 8 over 24 layers: the last block can only merge 6
        let eff = constant_schedule(8, 24).unwrap().effective(197);
        assert_eq!(&eff[..23], &[8; 23]);
        assert_eq!(eff[23], 6);
    }
}
