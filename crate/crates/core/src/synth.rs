//! Synthetic multitemporal SAR scene generation: a piecewise-constant
//! reflectivity map built from random ellipses, altered inside change regions
//! for the second acquisition, with independent multi-look speckle on each.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub struct SynthScene {
    pub t1: Grid,
    pub t2: Grid,
    pub truth: Grid,
}

#[derive(Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn sample(rng: &mut ChaCha8Rng, size: f64, min_axis: f64, max_axis: f64) -> Self {
        let cy = rng.gen_range(0.0..size);
        let cx = rng.gen_range(0.0..size);
        let a = rng.gen_range(min_axis..max_axis);
        let b = rng.gen_range(min_axis..max_axis);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        Ellipse { cy, cx, a, b, cos_t: theta.cos(), sin_t: theta.sin() }
    }

    fn contains(&self, row: usize, col: usize) -> bool {
        let dy = row as f64 - self.cy;
        let dx = col as f64 - self.cx;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Noise-free reflectivity pair plus the exact changed-pixel mask. Split out
/// so tests can verify the truth mask against the reflectivities directly.
pub(crate) fn reflectivity_pair(
    size: usize,
    seed: u64,
    n_regions: usize,
) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;

    let base = rng.gen_range(28.0..52.0);
    let mut r1 = vec![base; size * size];
    for _ in 0..6 {
        let e = Ellipse::sample(&mut rng, s, s / 16.0, s / 5.0);
        let value = rng.gen_range(15.0..110.0);
        for row in 0..size {
            for col in 0..size {
                if e.contains(row, col) {
                    r1[row * size + col] = value;
                }
            }
        }
    }

    // Change regions rewrite the second scene from the first one so a pixel
    // differs exactly when some change ellipse covers it. Bright regions are
    // darkened and dark ones brightened; the factors keep the log-ratio step
    // of a changed pixel around twice the speckle log-ratio spread.
    let mut r2 = r1.clone();
    let mut changed = vec![false; size * size];
    for _ in 0..n_regions {
        let e = Ellipse::sample(&mut rng, s, s / 14.0, s / 7.0);
        let brighten = rng.gen_range(3.6..4.6);
        let darken = rng.gen_range(0.10..0.20);
        for row in 0..size {
            for col in 0..size {
                if e.contains(row, col) {
                    let p = row * size + col;
                    let f = if r1[p] <= 75.0 { brighten } else { darken };
                    r2[p] = r1[p] * f;
                    changed[p] = true;
                }
            }
        }
    }
    (r1, r2, changed)
}

/// One multi-look speckle multiplier: mean-1 gamma with shape `looks`.
pub(crate) fn sample_speckle(rng: &mut ChaCha8Rng, looks: u32) -> f64 {
    let g = Gamma::new(looks as f64, 1.0 / looks as f64).expect("gamma parameters");
    g.sample(rng)
}

fn apply_speckle(reflectivity: &[f64], rng: &mut ChaCha8Rng, looks: u32) -> Vec<f32> {
    reflectivity
        .iter()
        .map(|&r| (r * sample_speckle(rng, looks)).clamp(0.0, 255.0) as f32)
        .collect()
}

/// Build a seeded synthetic scene pair with ground truth.
pub fn synth_scene(size: usize, seed: u64, looks: u32, n_regions: usize) -> Result<SynthScene> {
    if size < 64 {
        return Err(Error::invalid("synth_scene", format!("size {} must be at least 64", size)));
    }
    if looks < 1 {
        return Err(Error::invalid("synth_scene", "looks must be at least 1"));
    }
    let (r1, r2, changed) = reflectivity_pair(size, seed, n_regions);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5bec_c1e5_eed5);
    let t1 = apply_speckle(&r1, &mut rng, looks);
    let t2 = apply_speckle(&r2, &mut rng, looks);
    let truth: Vec<f32> = changed.iter().map(|&c| if c { 255.0 } else { 0.0 }).collect();

    Ok(SynthScene {
        t1: Grid::new(size, size, t1)?,
        t2: Grid::new(size, size, t2)?,
        truth: Grid::new(size, size, truth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::seeded_rng;

    #[test]
    fn no_change_regions_give_all_zero_truth() {
        let scene = synth_scene(64, 7, 4, 0).unwrap();
        assert!(scene.truth.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = synth_scene(64, 42, 4, 3).unwrap();
        let b = synth_scene(64, 42, 4, 3).unwrap();
        assert_eq!(a.t1, b.t1);
        assert_eq!(a.t2, b.t2);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn truth_marks_exactly_the_reflectivity_differences() {
        for seed in [1, 2, 3] {
            let (r1, r2, changed) = reflectivity_pair(64, seed, 3);
            for i in 0..r1.len() {
                assert_eq!(changed[i], r1[i] != r2[i], "pixel {i} seed {seed}");
            }
            let scene = synth_scene(64, seed, 4, 3).unwrap();
            for (i, &c) in changed.iter().enumerate() {
                let want = if c { 255.0 } else { 0.0 };
                assert_eq!(scene.truth.data()[i], want);
            }
        }
    }

    #[test]
    fn speckle_multiplier_moments_match_gamma() {
        // mean 1 within 0.01 and variance close to 1/L over 1e6 draws
        let mut rng = seeded_rng(99);
        let looks = 4;
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = sample_speckle(&mut rng, looks);
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((mean - 1.0).abs() < 0.01, "speckle mean {mean}");
        assert!((var - 0.25).abs() < 0.005, "speckle variance {var}");
    }

    #[test]
    fn rejects_tiny_scene_and_zero_looks() {
        assert!(synth_scene(32, 1, 4, 1).is_err());
        assert!(synth_scene(64, 1, 0, 1).is_err());
    }
}
