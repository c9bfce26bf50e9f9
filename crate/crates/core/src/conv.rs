//! Raw 2-D convolution kernels: im2row + GEMM forward, and the matching
//! input/kernel/bias gradients.
//!
//! Work is split over fixed-size sample chunks so results are bitwise
//! reproducible: every chunk writes a disjoint output region, and partial
//! kernel gradients are reduced sequentially in chunk order no matter how
//! many worker threads rayon uses.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Samples per parallel task. Fixed (not thread-count dependent) so the
/// partition, and therefore the float accumulation order, never changes.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dSpec {
    pub fn infer(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be N,C,H,W; got rank {}", input_shape.len()),
            ));
        }
        if kernel_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be C_out,C_in/groups,kh,kw; got rank {}", kernel_shape.len()),
            ));
        }
        let (batch, in_channels, in_h, in_w) =
            (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (out_channels, k_cin, k_h, k_w) =
            (kernel_shape[0], kernel_shape[1], kernel_shape[2], kernel_shape[3]);
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "groups {} must divide C_in {} and C_out {}",
                    groups, in_channels, out_channels
                ),
            ));
        }
        if k_cin != in_channels / groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel dimension 1 is {}, expected C_in/groups = {}/{} = {}",
                    k_cin,
                    in_channels,
                    groups,
                    in_channels / groups
                ),
            ));
        }
        let span_h = in_h + 2 * pad;
        let span_w = in_w + 2 * pad;
        if span_h < k_h || span_w < k_w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", k_h, k_w, span_h, span_w),
            ));
        }
        // Output extent uses integer division: trailing positions that do not
        // fit a full window are dropped, as the strided 1x1 projections over
        // even-sized maps require.
        let out_h = (span_h - k_h) / stride + 1;
        let out_w = (span_w - k_w) / stride + 1;
        Ok(Conv2dSpec {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            k_h,
            k_w,
            stride,
            pad,
            groups,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Patch length per output position within one group.
    pub(crate) fn patch_len(&self) -> usize {
        (self.in_channels / self.groups) * self.k_h * self.k_w
    }
}

/// Gather the im2col block for one sample and group. Row `q` (one kernel
/// offset of one channel) is written at `dst[q * row_len + col_off ..]`, so
/// several samples can share one matrix with `row_len = samples * spatial()`.
/// Rows are built from contiguous shifted runs of the input plane.
fn fill_cols<T: Scalar>(
    input_n: &[T],
    spec: &Conv2dSpec,
    group: usize,
    dst: &mut [T],
    row_len: usize,
    col_off: usize,
) {
    let cg = spec.in_channels / spec.groups;
    let (h, w) = (spec.in_h, spec.in_w);
    let plane = h * w;
    let base_c = group * cg;

    let mut q = 0;
    for c in 0..cg {
        let ch = &input_n[(base_c + c) * plane..(base_c + c + 1) * plane];
        for dh in 0..spec.k_h {
            for dw in 0..spec.k_w {
                let row = &mut dst[q * row_len + col_off..q * row_len + col_off + spec.spatial()];
                q += 1;
                for oh in 0..spec.out_h {
                    let ih = (oh * spec.stride + dh) as isize - spec.pad as isize;
                    let cell = &mut row[oh * spec.out_w..(oh + 1) * spec.out_w];
                    if ih < 0 || ih >= h as isize {
                        cell.fill(T::zero());
                        continue;
                    }
                    let src_row = &ch[ih as usize * w..ih as usize * w + w];
                    if spec.stride == 1 {
                        let shift = dw as isize - spec.pad as isize;
                        let lo = ((-shift).max(0) as usize).min(spec.out_w);
                        let hi = (w as isize - shift).clamp(lo as isize, spec.out_w as isize)
                            as usize;
                        cell[..lo].fill(T::zero());
                        if hi > lo {
                            cell[lo..hi].copy_from_slice(
                                &src_row[(lo as isize + shift) as usize
                                    ..(hi as isize + shift) as usize],
                            );
                        }
                        cell[hi..].fill(T::zero());
                    } else {
                        for (ow, o) in cell.iter_mut().enumerate() {
                            let iw = (ow * spec.stride + dw) as isize - spec.pad as isize;
                            *o = if iw >= 0 && iw < w as isize {
                                src_row[iw as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add one sample's im2col gradient block back onto the input image.
/// Mirrors the layout of [`fill_cols`].
fn add_cols_to_input<T: Scalar>(
    cols: &[T],
    spec: &Conv2dSpec,
    group: usize,
    dinput_n: &mut [T],
    row_len: usize,
    col_off: usize,
) {
    let cg = spec.in_channels / spec.groups;
    let (h, w) = (spec.in_h, spec.in_w);
    let plane = h * w;
    let base_c = group * cg;

    let mut q = 0;
    for c in 0..cg {
        let ch = &mut dinput_n[(base_c + c) * plane..(base_c + c + 1) * plane];
        for dh in 0..spec.k_h {
            for dw in 0..spec.k_w {
                let row = &cols[q * row_len + col_off..q * row_len + col_off + spec.spatial()];
                q += 1;
                for oh in 0..spec.out_h {
                    let ih = (oh * spec.stride + dh) as isize - spec.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &row[oh * spec.out_w..(oh + 1) * spec.out_w];
                    let dst_row = &mut ch[ih as usize * w..ih as usize * w + w];
                    if spec.stride == 1 {
                        let shift = dw as isize - spec.pad as isize;
                        let lo = ((-shift).max(0) as usize).min(spec.out_w);
                        let hi = (w as isize - shift).clamp(lo as isize, spec.out_w as isize)
                            as usize;
                        if hi > lo {
                            let base = (lo as isize + shift) as usize;
                            for (d, &v) in
                                dst_row[base..base + (hi - lo)].iter_mut().zip(&src[lo..hi])
                            {
                                *d += v;
                            }
                        }
                    } else {
                        for (ow, &v) in src.iter().enumerate() {
                            let iw = (ow * spec.stride + dw) as isize - spec.pad as isize;
                            if iw >= 0 && iw < w as isize {
                                dst_row[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution (cross-correlation). `kernel` is `[C_out, C_in/g, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    spec: &Conv2dSpec,
) -> Vec<T> {
    let s = spec.spatial();
    let k = spec.patch_len();
    let coutg = spec.out_channels / spec.groups;
    let in_stride = spec.in_channels * spec.in_h * spec.in_w;
    let out_stride = spec.out_channels * s;

    let mut output = vec![T::zero(); spec.batch * out_stride];
    output.par_chunks_mut(CHUNK * out_stride).enumerate().for_each(|(ci, out_chunk)| {
        let n0 = ci * CHUNK;
        let n_samples = out_chunk.len() / out_stride;
        let width = n_samples * s;
        let mut cols = vec![T::zero(); k * width];
        let mut cmat = vec![T::zero(); coutg * width];
        for g in 0..spec.groups {
            for i in 0..n_samples {
                let input_n = &input[(n0 + i) * in_stride..(n0 + i + 1) * in_stride];
                fill_cols(input_n, spec, g, &mut cols, width, i * s);
            }
            let kmat = &kernel[g * coutg * k..(g + 1) * coutg * k];
            // cmat[co, col] = sum_q kmat[co, q] * cols[q, col], oriented so
            // the larger extent is the GEMM's M
            if width >= coutg {
                T::gemm(width, k, coutg, T::one(), &cols, 1, width as isize, kmat, 1, k as isize,
                        T::zero(), &mut cmat, 1, width as isize);
            } else {
                T::gemm(coutg, k, width, T::one(), kmat, k as isize, 1, &cols, width as isize, 1,
                        T::zero(), &mut cmat, width as isize, 1);
            }
            for i in 0..n_samples {
                let out_n = &mut out_chunk[i * out_stride..(i + 1) * out_stride];
                for co in 0..coutg {
                    let co_global = g * coutg + co;
                    let dst = &mut out_n[co_global * s..(co_global + 1) * s];
                    let src = &cmat[co * width + i * s..co * width + (i + 1) * s];
                    match bias {
                        Some(b) => {
                            let bv = b[co_global];
                            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                                *d = v + bv;
                            }
                        }
                        None => dst.copy_from_slice(src),
                    }
                }
            }
        }
    });
    output
}

/// Gradient with respect to the input image.
pub fn conv2d_backward_input<T: Scalar>(
    grad: &[T],
    kernel: &[T],
    spec: &Conv2dSpec,
) -> Vec<T> {
    let s = spec.spatial();
    let k = spec.patch_len();
    let coutg = spec.out_channels / spec.groups;
    let in_stride = spec.in_channels * spec.in_h * spec.in_w;
    let out_stride = spec.out_channels * s;

    let mut dinput = vec![T::zero(); spec.batch * in_stride];
    dinput.par_chunks_mut(CHUNK * in_stride).enumerate().for_each(|(ci, din_chunk)| {
        let n0 = ci * CHUNK;
        let n_samples = din_chunk.len() / in_stride;
        let width = n_samples * s;
        let mut gmat = vec![T::zero(); coutg * width];
        let mut dcols = vec![T::zero(); k * width];
        for g in 0..spec.groups {
            for i in 0..n_samples {
                let g_ng = &grad[(n0 + i) * out_stride + g * coutg * s..];
                for co in 0..coutg {
                    gmat[co * width + i * s..co * width + (i + 1) * s]
                        .copy_from_slice(&g_ng[co * s..(co + 1) * s]);
                }
            }
            let kmat = &kernel[g * coutg * k..(g + 1) * coutg * k];
            // dcols[q, col] = sum_co kmat[co, q] * gmat[co, col]
            if k >= width {
                T::gemm(k, coutg, width, T::one(), kmat, 1, k as isize, &gmat, width as isize, 1,
                        T::zero(), &mut dcols, width as isize, 1);
            } else {
                T::gemm(width, coutg, k, T::one(), &gmat, 1, width as isize, kmat, k as isize, 1,
                        T::zero(), &mut dcols, 1, width as isize);
            }
            for i in 0..n_samples {
                add_cols_to_input(
                    &dcols,
                    spec,
                    g,
                    &mut din_chunk[i * in_stride..(i + 1) * in_stride],
                    width,
                    i * s,
                );
            }
        }
    });
    dinput
}

/// Gradient with respect to the kernel.
pub fn conv2d_backward_kernel<T: Scalar>(
    grad: &[T],
    input: &[T],
    spec: &Conv2dSpec,
) -> Vec<T> {
    let s = spec.spatial();
    let k = spec.patch_len();
    let coutg = spec.out_channels / spec.groups;
    let in_stride = spec.in_channels * spec.in_h * spec.in_w;
    let out_stride = spec.out_channels * s;
    let n_chunks = spec.batch.div_ceil(CHUNK);

    // Per-chunk partial kernel gradients, reduced in chunk order afterwards.
    let partials: Vec<Vec<T>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let n0 = ci * CHUNK;
            let n_samples = (n0 + CHUNK).min(spec.batch) - n0;
            let width = n_samples * s;
            let mut partial = vec![T::zero(); spec.out_channels * k];
            let mut cols = vec![T::zero(); k * width];
            let mut gmat = vec![T::zero(); coutg * width];
            for g in 0..spec.groups {
                for i in 0..n_samples {
                    let input_n = &input[(n0 + i) * in_stride..(n0 + i + 1) * in_stride];
                    fill_cols(input_n, spec, g, &mut cols, width, i * s);
                    let g_ng = &grad[(n0 + i) * out_stride + g * coutg * s..];
                    for co in 0..coutg {
                        gmat[co * width + i * s..co * width + (i + 1) * s]
                            .copy_from_slice(&g_ng[co * s..(co + 1) * s]);
                    }
                }
                // dk[co, q] = sum_col gmat[co, col] * cols[q, col]
                let dst = &mut partial[g * coutg * k..(g + 1) * coutg * k];
                if k >= coutg {
                    T::gemm(k, width, coutg, T::one(), &cols, width as isize, 1, &gmat, 1,
                            width as isize, T::zero(), dst, 1, k as isize);
                } else {
                    T::gemm(coutg, width, k, T::one(), &gmat, width as isize, 1, &cols, 1,
                            width as isize, T::zero(), dst, k as isize, 1);
                }
            }
            partial
        })
        .collect();

    let mut dkernel = vec![T::zero(); spec.out_channels * k];
    for partial in partials {
        for (d, p) in dkernel.iter_mut().zip(partial.iter()) {
            *d += *p;
        }
    }
    dkernel
}

/// Gradient with respect to the bias: sum of the output gradient per channel.
pub fn conv2d_backward_bias<T: Scalar>(grad: &[T], spec: &Conv2dSpec) -> Vec<T> {
    let s = spec.spatial();
    let mut dbias = vec![T::zero(); spec.out_channels];
    for n in 0..spec.batch {
        for co in 0..spec.out_channels {
            let off = (n * spec.out_channels + co) * s;
            let mut acc = T::zero();
            for &v in &grad[off..off + s] {
                acc += v;
            }
            dbias[co] += acc;
        }
    }
    dbias
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, naive_conv2d, seeded_vec};

    #[test]
    fn all_ones_3x3_full_overlap_sums_to_nine() {
        let spec = Conv2dSpec::infer(&[1, 1, 3, 3], &[1, 1, 3, 3], 1, 0, 1).unwrap();
        let out = conv2d_forward::<f64>(&[1.0; 9], &[1.0; 9], None, &spec);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn same_padding_28x28_keeps_spatial_size() {
        let spec = Conv2dSpec::infer(&[1, 1, 28, 28], &[16, 1, 3, 3], 1, 1, 1).unwrap();
        assert_eq!(spec.output_shape(), vec![1, 16, 28, 28]);
    }

    #[test]
    fn matches_naive_reference() {
        let input = seeded_vec(2 * 4 * 6 * 6, 11);
        let kernel = seeded_vec(8 * 4 * 3 * 3, 12);
        let bias = seeded_vec(8, 13);
        let spec = Conv2dSpec::infer(&[2, 4, 6, 6], &[8, 4, 3, 3], 1, 0, 1).unwrap();
        let got = conv2d_forward::<f64>(&input, &kernel, Some(&bias), &spec);
        let want = naive_conv2d(&input, &kernel, Some(&bias), &spec);
        assert_close(&got, &want, 1e-12);
    }

    #[test]
    fn strided_padded_matches_naive_reference() {
        let input = seeded_vec(3 * 2 * 7 * 9, 21);
        let kernel = seeded_vec(5 * 2 * 3 * 3, 22);
        let spec = Conv2dSpec::infer(&[3, 2, 7, 9], &[5, 2, 3, 3], 2, 1, 1).unwrap();
        let got = conv2d_forward::<f64>(&input, &kernel, None, &spec);
        let want = naive_conv2d(&input, &kernel, None, &spec);
        assert_close(&got, &want, 1e-12);
    }

    #[test]
    fn grouped_equals_independent_convolutions() {
        // groups=2 over 4 input channels must equal two 2-channel convolutions.
        let input = seeded_vec(2 * 4 * 5 * 5, 31);
        let kernel = seeded_vec(6 * 2 * 3 * 3, 32);
        let spec = Conv2dSpec::infer(&[2, 4, 5, 5], &[6, 2, 3, 3], 1, 1, 2).unwrap();
        let got = conv2d_forward::<f64>(&input, &kernel, None, &spec);

        let sub = Conv2dSpec::infer(&[1, 2, 5, 5], &[3, 2, 3, 3], 1, 1, 1).unwrap();
        let plane = 5 * 5;
        for n in 0..2 {
            for g in 0..2 {
                let in_ng: Vec<f64> =
                    input[(n * 4 + g * 2) * plane..(n * 4 + g * 2 + 2) * plane].to_vec();
                let k_g = kernel[g * 3 * 2 * 9..(g + 1) * 3 * 2 * 9].to_vec();
                let want = naive_conv2d(&in_ng, &k_g, None, &sub);
                let got_ng = &got[(n * 6 + g * 3) * plane..(n * 6 + g * 3 + 3) * plane];
                assert_close(got_ng, &want, 1e-12);
            }
        }
    }

    #[test]
    fn strided_output_extent_floors() {
        // 1x1 stride-4 over 28 samples positions 0,4,...,24 -> 7
        let spec = Conv2dSpec::infer(&[1, 16, 28, 28], &[64, 16, 1, 1], 4, 0, 1).unwrap();
        assert_eq!((spec.out_h, spec.out_w), (7, 7));
        // kernel larger than the padded input is still rejected
        assert!(Conv2dSpec::infer(&[1, 1, 3, 3], &[1, 1, 5, 5], 1, 0, 1).is_err());
    }

    #[test]
    fn rejects_channel_mismatch_naming_dimension() {
        let err = Conv2dSpec::infer(&[1, 6, 5, 5], &[4, 3, 3, 3], 1, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("C_in"), "message should name the channel dimension: {msg}");
    }

    #[test]
    fn backward_kernel_matches_naive_accumulation() {
        let spec = Conv2dSpec::infer(&[2, 3, 5, 5], &[4, 3, 3, 3], 1, 1, 1).unwrap();
        let input = seeded_vec(2 * 3 * 5 * 5, 41);
        let grad = seeded_vec(2 * 4 * 5 * 5, 42);
        let got = conv2d_backward_kernel::<f64>(&grad, &input, &spec);

        // Direct accumulation over all output positions.
        let mut want = vec![0.0; 4 * 3 * 9];
        for n in 0..2 {
            for co in 0..4 {
                for oh in 0..5usize {
                    for ow in 0..5usize {
                        let g = grad[((n * 4 + co) * 5 + oh) * 5 + ow];
                        for c in 0..3 {
                            for dh in 0..3usize {
                                for dw in 0..3usize {
                                    let ih = oh as isize + dh as isize - 1;
                                    let iw = ow as isize + dw as isize - 1;
                                    if (0..5).contains(&ih) && (0..5).contains(&iw) {
                                        want[((co * 3 + c) * 3 + dh) * 3 + dw] += g * input
                                            [((n * 3 + c) * 5 + ih as usize) * 5 + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        assert_close(&got, &want, 1e-12);
    }
}

/// Forward pass of the per-sample mixed-kernel convolution: sample `n` is
/// convolved with `sum_i alpha[n, i] * experts[i]`. `spec` describes the
/// single-sample convolution.
pub fn condconv_forward<T: Scalar>(
    input: &[T],
    experts: &[T],
    alpha: &[T],
    k_experts: usize,
    spec: &Conv2dSpec,
) -> Vec<T> {
    let s = spec.spatial();
    let k = spec.patch_len();
    let cout = spec.out_channels;
    let klen = cout * k;
    let in_stride = spec.in_channels * spec.in_h * spec.in_w;
    let out_stride = cout * s;
    let batch = input.len() / in_stride;

    let mut output = vec![T::zero(); batch * out_stride];
    output.par_chunks_mut(CHUNK * out_stride).enumerate().for_each(|(ci, out_chunk)| {
        let n0 = ci * CHUNK;
        let n_samples = out_chunk.len() / out_stride;
        let mut cols = vec![T::zero(); s * k];
        let mut mixed = vec![T::zero(); klen];
        for i in 0..n_samples {
            let n = n0 + i;
            mix_into(&mut mixed, experts, &alpha[n * k_experts..(n + 1) * k_experts]);
            fill_cols(&input[n * in_stride..(n + 1) * in_stride], spec, 0, &mut cols, s, 0);
            let out_n = &mut out_chunk[i * out_stride..(i + 1) * out_stride];
            if s >= cout {
                T::gemm(s, k, cout, T::one(), &cols, 1, s as isize, &mixed, 1, k as isize, T::zero(), out_n, 1, s as isize);
            } else {
                T::gemm(cout, k, s, T::one(), &mixed, k as isize, 1, &cols, s as isize, 1, T::zero(), out_n, s as isize, 1);
            }
        }
    });
    output
}

/// Gradients of the mixed-kernel convolution with respect to the input, the
/// expert bank, and the routing weights.
pub fn condconv_backward<T: Scalar>(
    grad: &[T],
    input: &[T],
    experts: &[T],
    alpha: &[T],
    k_experts: usize,
    spec: &Conv2dSpec,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let s = spec.spatial();
    let k = spec.patch_len();
    let cout = spec.out_channels;
    let klen = cout * k;
    let in_stride = spec.in_channels * spec.in_h * spec.in_w;
    let out_stride = cout * s;
    let batch = input.len() / in_stride;

    let mut dinput = vec![T::zero(); input.len()];
    let mut dalpha = vec![T::zero(); batch * k_experts];
    // chunk-parallel over disjoint dinput/dalpha slices, with per-chunk
    // partial expert gradients reduced in chunk order afterwards
    let partials: Vec<Vec<T>> = dinput
        .par_chunks_mut(CHUNK * in_stride)
        .zip(dalpha.par_chunks_mut(CHUNK * k_experts))
        .enumerate()
        .map(|(ci, (din_chunk, dal_chunk))| {
            let n0 = ci * CHUNK;
            let n_samples = din_chunk.len() / in_stride;
            let mut dexp = vec![T::zero(); k_experts * klen];
            let mut cols = vec![T::zero(); s * k];
            let mut dcols = vec![T::zero(); s * k];
            let mut mixed = vec![T::zero(); klen];
            let mut dmix = vec![T::zero(); klen];
            for i in 0..n_samples {
                let n = n0 + i;
                let g_n = &grad[n * out_stride..(n + 1) * out_stride];
                let in_n = &input[n * in_stride..(n + 1) * in_stride];
                let al_n = &alpha[n * k_experts..(n + 1) * k_experts];

                // kernel-gradient of this sample's mixed kernel
                fill_cols(in_n, spec, 0, &mut cols, s, 0);
                if k >= cout {
                    T::gemm(k, s, cout, T::one(), &cols, s as isize, 1, g_n, 1, s as isize, T::zero(), &mut dmix, 1, k as isize);
                } else {
                    T::gemm(cout, s, k, T::one(), g_n, s as isize, 1, &cols, 1, s as isize, T::zero(), &mut dmix, k as isize, 1);
                }
                for (e, &a) in al_n.iter().enumerate() {
                    let bank = &experts[e * klen..(e + 1) * klen];
                    let dst = &mut dexp[e * klen..(e + 1) * klen];
                    let mut dot = T::zero();
                    for j in 0..klen {
                        dot += dmix[j] * bank[j];
                        dst[j] += a * dmix[j];
                    }
                    dal_chunk[i * k_experts + e] = dot;
                }

                // input gradient through the mixed kernel
                mix_into(&mut mixed, experts, al_n);
                if k >= s {
                    T::gemm(k, cout, s, T::one(), &mixed, 1, k as isize, g_n, s as isize, 1, T::zero(), &mut dcols, s as isize, 1);
                } else {
                    T::gemm(s, cout, k, T::one(), g_n, 1, s as isize, &mixed, k as isize, 1, T::zero(), &mut dcols, 1, s as isize);
                }
                add_cols_to_input(&dcols, spec, 0, &mut din_chunk[i * in_stride..(i + 1) * in_stride], s, 0);
            }
            dexp
        })
        .collect();

    let mut dexperts = vec![T::zero(); k_experts * klen];
    for partial in partials {
        for (d, p) in dexperts.iter_mut().zip(partial.iter()) {
            *d += *p;
        }
    }
    (dinput, dexperts, dalpha)
}

fn mix_into<T: Scalar>(mixed: &mut [T], experts: &[T], alpha: &[T]) {
    let klen = mixed.len();
    mixed.fill(T::zero());
    for (i, &a) in alpha.iter().enumerate() {
        let bank = &experts[i * klen..(i + 1) * klen];
        for (m, &v) in mixed.iter_mut().zip(bank.iter()) {
            *m += a * v;
        }
    }
}
