//! Shows which input patches ended up in the same final token: each
//! patch is painted with the mean color of its token's region and every
//! region gets a one-pixel border in a color derived from the token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tome_core::vit::{model_forward, ModelConfig, ModelWeights};

use crate::error::{CliError, Result};
use crate::ppm::Ppm;

/// Final token index for every patch (row-major over the patch grid).
///
/// Source id 0 is the class token and patch `p` is source `p + 1`. Fails if
/// the sources do not cover every patch exactly once.
pub fn region_map(final_sources: &[Vec<u32>], num_patches: usize) -> Result<Vec<usize>> {
    let mut owner = vec![usize::MAX; num_patches];
    let mut saw_cls = false;
    for (token, sources) in final_sources.iter().enumerate() {
        for &s in sources {
            if s == 0 {
                if saw_cls {
                    return Err(CliError::Usage("class token appears twice".into()));
                }
                saw_cls = true;
                continue;
            }
            let p = s as usize - 1;
            if p >= num_patches {
                return Err(CliError::Usage(format!("source {s} is not a patch of this grid")));
            }
            if owner[p] != usize::MAX {
                return Err(CliError::Usage(format!("patch {p} belongs to two tokens")));
            }
            owner[p] = token;
        }
    }
    if let Some(p) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(CliError::Usage(format!("patch {p} belongs to no token")));
    }
    Ok(owner)
}

/// Border color for a token, seeded by its smallest source id.
pub fn border_color(sources: &[u32]) -> [u8; 3] {
    let seed = sources.iter().copied().min().unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Paints the region image for the given patch ownership.
pub fn render(input: &Ppm, patch: usize, owner: &[usize], final_sources: &[Vec<u32>]) -> Ppm {
    let grid = input.width / patch;
    let tokens = final_sources.len();
    let mut sums = vec![[0u64; 3]; tokens];
    let mut counts = vec![0u64; tokens];
    for y in 0..input.height {
        for x in 0..input.width {
            let t = owner[(y / patch) * grid + x / patch];
            let px = input.get(x, y);
            for c in 0..3 {
                sums[t][c] += px[c] as u64;
            }
            counts[t] += 1;
        }
    }
    let fill: Vec<[u8; 3]> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| {
            let n = n.max(1);
            [0, 1, 2].map(|c| ((s[c] + n / 2) / n) as u8)
        })
        .collect();
    let borders: Vec<[u8; 3]> = final_sources.iter().map(|s| border_color(s)).collect();

    let token_at = |x: usize, y: usize| owner[(y / patch) * grid + x / patch];
    let mut out = Ppm::filled(input.width, input.height, [0, 0, 0]);
    for y in 0..input.height {
        for x in 0..input.width {
            let t = token_at(x, y);
            let edge = x == 0
                || y == 0
                || x + 1 == input.width
                || y + 1 == input.height
                || token_at(x - 1, y) != t
                || token_at(x + 1, y) != t
                || token_at(x, y - 1) != t
                || token_at(x, y + 1) != t;
            out.set(x, y, if edge { borders[t] } else { fill[t] });
        }
    }
    out
}

pub struct Visualization {
    pub image: Ppm,
    /// Final token per patch.
    pub regions: Vec<usize>,
    pub final_sources: Vec<Vec<u32>>,
}

/// Runs the model on `input` and renders the merge regions.
pub fn visualize(cfg: &ModelConfig, weights: &ModelWeights<f32>, input: &Ppm) -> Result<Visualization> {
    if cfg.channels_in != 3 {
        return Err(CliError::Usage(format!(
            "visualization needs a 3-channel model, config has {}",
            cfg.channels_in
        )));
    }
    if input.width != cfg.image_size || input.height != cfg.image_size {
        return Err(CliError::Usage(format!(
            "image is {}x{}, model expects {}x{}",
            input.width, input.height, cfg.image_size, cfg.image_size
        )));
    }
    let (_, trace) = model_forward(&input.to_image::<f32>(), cfg, weights)?;
    let regions = region_map(&trace.final_sources, cfg.num_patches())?;
    let image = render(input, cfg.patch_size, &regions, &trace.final_sources);
    Ok(Visualization {
        image,
        regions,
        final_sources: trace.final_sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tome_core::schedule::{constant_schedule, Schedule};
    use tome_core::vit::{init_weights, ToMeConfig};

    fn cfg(schedule: Schedule) -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            channels_in: 3,
            width: 8,
            depth: schedule.len(),
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            tome: ToMeConfig::with_schedule(schedule),
        }
    }

    fn noisy(seed: u64, size: usize) -> Ppm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Ppm::filled(size, size, [0, 0, 0]);
        p.pixels.iter_mut().for_each(|v| *v = rng.gen());
        p
    }

    fn interior(p: &Ppm, patch: usize, gx: usize, gy: usize) -> [u8; 3] {
        p.get(gx * patch + patch / 2, gy * patch + patch / 2)
    }

    #[test]
    fn no_merging_paints_each_patch_its_own_mean() {
        let c = cfg(Schedule::zeros(2));
        let w = init_weights(&c, 1);
        let input = noisy(3, 16);
        let vis = visualize(&c, &w, &input).unwrap();
        assert_eq!(vis.regions, (1..=16).collect::<Vec<_>>());
        for gy in 0..4 {
            for gx in 0..4 {
                let (mut s, n) = ([0u64; 3], 16u64);
                for y in 0..4 {
                    for x in 0..4 {
                        let px = input.get(gx * 4 + x, gy * 4 + y);
                        (0..3).for_each(|k| s[k] += px[k] as u64);
                    }
                }
                let want = s.map(|v| ((v + n / 2) / n) as u8);
                assert_eq!(interior(&vis.image, 4, gx, gy), want);
            }
        }
    }

    #[test]
    fn uniform_image_keeps_its_color() {
        let c = cfg(constant_schedule(3, 3).unwrap());
        let w = init_weights(&c, 2);
        let input = Ppm::filled(16, 16, [10, 200, 77]);
        let vis = visualize(&c, &w, &input).unwrap();
        assert!(vis.final_sources.len() < 17);
        for gy in 0..4 {
            for gx in 0..4 {
                assert_eq!(interior(&vis.image, 4, gx, gy), [10, 200, 77]);
            }
        }
    }

    #[test]
    fn identical_patches_share_a_region_under_heavy_merging() {
        // 2x2 patch grid, two white patches
        let mut c = cfg(Schedule::new(vec![8, 8, 8]));
        c.image_size = 8;
        let w = init_weights(&c, 5);
        let mut input = noisy(9, 8);
        for y in 0..4 {
            for x in 0..4 {
                input.set(x, y, [255, 255, 255]);
                input.set(x + 4, y + 4, [255, 255, 255]);
            }
        }
        let vis = visualize(&c, &w, &input).unwrap();
        assert_eq!(vis.regions[0], vis.regions[3]);
        let owned: usize = vis.final_sources.iter().map(|s| s.iter().filter(|&&x| x > 0).count()).sum();
        assert_eq!(owned, 4);
    }

    #[test]
    fn region_map_rejects_overlap_and_gaps() {
        assert!(region_map(&[vec![0], vec![1, 2]], 2).is_ok());
        assert!(region_map(&[vec![0], vec![1], vec![1, 2]], 2).is_err());
        assert!(region_map(&[vec![0], vec![1]], 2).is_err());
        assert!(region_map(&[vec![0], vec![1, 5]], 2).is_err());
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let c = cfg(Schedule::zeros(1));
        let w = init_weights(&c, 1);
        assert!(visualize(&c, &w, &Ppm::filled(8, 8, [0, 0, 0])).is_err());
    }

    #[test]
    fn border_color_depends_only_on_min_source() {
        assert_eq!(border_color(&[7, 3, 9]), border_color(&[3, 12]));
        assert_ne!(border_color(&[3]), border_color(&[4]));
    }
}
