//! Shared test-only helpers: reference implementations and numeric checks.
//! Everything here is oracle code, kept independent of the production paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::Conv2dSpec;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1), reproducible per seed.
pub fn seeded_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len(), "length mismatch");
    for (i, (g, w)) in got.iter().zip(want.iter()).enumerate() {
        assert!(
            (g - w).abs() <= tol,
            "element {i}: got {g}, want {w}, |diff| {} > {tol}",
            (g - w).abs()
        );
    }
}

/// Quadruple-loop convolution used as the oracle for the GEMM path.
pub fn naive_conv2d(
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    spec: &Conv2dSpec,
) -> Vec<f64> {
    let cg = spec.in_channels / spec.groups;
    let coutg = spec.out_channels / spec.groups;
    let mut out = vec![0.0; spec.batch * spec.out_channels * spec.out_h * spec.out_w];
    for n in 0..spec.batch {
        for co in 0..spec.out_channels {
            let g = co / coutg;
            for oh in 0..spec.out_h {
                for ow in 0..spec.out_w {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for c in 0..cg {
                        let ci = g * cg + c;
                        for dh in 0..spec.k_h {
                            for dw in 0..spec.k_w {
                                let ih = (oh * spec.stride + dh) as isize - spec.pad as isize;
                                let iw = (ow * spec.stride + dw) as isize - spec.pad as isize;
                                if ih >= 0
                                    && ih < spec.in_h as isize
                                    && iw >= 0
                                    && iw < spec.in_w as isize
                                {
                                    let iv = input[((n * spec.in_channels + ci) * spec.in_h
                                        + ih as usize)
                                        * spec.in_w
                                        + iw as usize];
                                    let kv = kernel
                                        [((co * cg + c) * spec.k_h + dh) * spec.k_w + dw];
                                    acc += iv * kv;
                                }
                            }
                        }
                    }
                    out[((n * spec.out_channels + co) * spec.out_h + oh) * spec.out_w + ow] = acc;
                }
            }
        }
    }
    out
}

/// Central finite difference d f / d x[i] with step h.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Relative error with an absolute floor, the usual gradient-check metric.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / f64::max(1e-6, f64::max(got.abs(), want.abs()))
}
