//! im2col-backed 2-D convolution kernels (cross-correlation, as is
//! conventional for learned filters).
//!
//! Forward lowers every input sample to a patch matrix P of shape
//! `[C_in*k*k, H_out*W_out]` so that the convolution becomes a single GEMM
//! `out = W_mat * P` with `W_mat = [C_out, C_in*k*k]`. Backward reuses the
//! same lowering: `dW += dOut * P^T` and `dP = W^T * dOut` followed by a
//! scatter-add back to image layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn new(
        n: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || k == 0 {
            return None;
        }
        let h_p = h + 2 * pad;
        let w_p = w + 2 * pad;
        if h_p < k || w_p < k {
            return None;
        }
        let h_out = (h_p - k) / stride + 1;
        let w_out = (w_p - k) / stride + 1;
        Some(ConvDims { n, c_in, h, w, c_out, k, stride, pad, h_out, w_out })
    }

    fn patch_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Lower one input sample `[C_in, H, W]` into the patch matrix
/// `[C_in*k*k, H_out*W_out]`. Out-of-bounds (padding) taps stay zero.
fn im2col(x: &[f64], d: &ConvDims, patches: &mut [f64]) {
    let cols = d.out_cols();
    patches.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..d.c_in {
        let chan = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for kh in 0..d.k {
            for kw in 0..d.k {
                let row = (ci * d.k + kh) * d.k + kw;
                let dst = &mut patches[row * cols..(row + 1) * cols];
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let src_row = &chan[ih as usize * d.w..(ih as usize + 1) * d.w];
                    let dst_row = &mut dst[oh * d.w_out..(oh + 1) * d.w_out];
                    for (ow, slot) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                        if iw >= 0 && iw < d.w as isize {
                            *slot = src_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-space gradient back into image layout; exact
/// adjoint of [`im2col`].
fn col2im_add(d_patches: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let cols = d.out_cols();
    for ci in 0..d.c_in {
        let chan = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for kh in 0..d.k {
            for kw in 0..d.k {
                let row = (ci * d.k + kh) * d.k + kw;
                let src = &d_patches[row * cols..(row + 1) * cols];
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let chan_row = &mut chan[ih as usize * d.w..(ih as usize + 1) * d.w];
                    let src_row = &src[oh * d.w_out..(oh + 1) * d.w_out];
                    for (ow, &g) in src_row.iter().enumerate() {
                        let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                        if iw >= 0 && iw < d.w as isize {
                            chan_row[iw as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass over a batch: `x [N, C_in, H, W]`, `w [C_out, C_in, k, k]`,
/// `b [C_out]` -> `[N, C_out, H_out, W_out]`.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
    let rows = d.patch_rows();
    let cols = d.out_cols();
    let mut out = vec![0.0; d.n * d.c_out * cols];
    let mut patches = vec![0.0; rows * cols];
    let w_view = ArrayView2::from_shape((d.c_out, rows), w).expect("weight view");
    for s in 0..d.n {
        im2col(&x[s * d.c_in * d.h * d.w..(s + 1) * d.c_in * d.h * d.w], d, &mut patches);
        let p_view = ArrayView2::from_shape((rows, cols), &patches).expect("patch view");
        let out_slice = &mut out[s * d.c_out * cols..(s + 1) * d.c_out * cols];
        let mut o_view = ArrayViewMut2::from_shape((d.c_out, cols), out_slice).expect("out view");
        general_mat_mul(1.0, &w_view, &p_view, 0.0, &mut o_view);
        for co in 0..d.c_out {
            let bias = b[co];
            out_slice[co * cols..(co + 1) * cols].iter_mut().for_each(|v| *v += bias);
        }
    }
    out
}

/// Backward pass: given upstream gradient `g_out [N, C_out, H_out, W_out]`,
/// return `(dx, dw, db)` matching the forward argument shapes. Pass
/// `need_dx = false` to skip the input-gradient GEMM (e.g. when the input is
/// raw data); `dx` comes back empty in that case.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g_out: &[f64],
    d: &ConvDims,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = d.patch_rows();
    let cols = d.out_cols();
    let mut dx = vec![0.0; if need_dx { x.len() } else { 0 }];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; d.c_out];
    let mut patches = vec![0.0; rows * cols];
    let mut d_patches = vec![0.0; rows * cols];
    let w_view = ArrayView2::from_shape((d.c_out, rows), w).expect("weight view");
    for s in 0..d.n {
        let x_s = &x[s * d.c_in * d.h * d.w..(s + 1) * d.c_in * d.h * d.w];
        let g_s = &g_out[s * d.c_out * cols..(s + 1) * d.c_out * cols];
        let g_view = ArrayView2::from_shape((d.c_out, cols), g_s).expect("grad view");

        im2col(x_s, d, &mut patches);
        let p_view = ArrayView2::from_shape((rows, cols), &patches).expect("patch view");
        {
            let mut dw_view = ArrayViewMut2::from_shape((d.c_out, rows), &mut dw[..]).expect("dw view");
            general_mat_mul(1.0, &g_view, &p_view.t(), 1.0, &mut dw_view);
        }
        if need_dx {
            {
                let mut dp_view =
                    ArrayViewMut2::from_shape((rows, cols), &mut d_patches[..]).expect("dp view");
                general_mat_mul(1.0, &w_view.t(), &g_view, 0.0, &mut dp_view);
            }
            col2im_add(
                &d_patches,
                d,
                &mut dx[s * d.c_in * d.h * d.w..(s + 1) * d.c_in * d.h * d.w],
            );
        }
        for co in 0..d.c_out {
            db[co] += g_s[co * cols..(co + 1) * cols].iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as the oracle for the GEMM path.
    fn conv2d_naive(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.n * d.c_out * d.h_out * d.w_out];
        for s in 0..d.n {
            for co in 0..d.c_out {
                for oh in 0..d.h_out {
                    for ow in 0..d.w_out {
                        let mut acc = b[co];
                        for ci in 0..d.c_in {
                            for kh in 0..d.k {
                                for kw in 0..d.k {
                                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                                    let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                                    if ih < 0 || ih >= d.h as isize || iw < 0 || iw >= d.w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((s * d.c_in + ci) * d.h + ih as usize) * d.w
                                        + iw as usize;
                                    let wi = ((co * d.c_in + ci) * d.k + kh) * d.k + kw;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((s * d.c_out + co) * d.h_out + oh) * d.w_out + ow] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        // small deterministic LCG; value distribution is irrelevant here
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn output_dims_follow_stride_and_padding() {
        let d = ConvDims::new(1, 3, 64, 64, 16, 3, 2, 1).unwrap();
        assert_eq!((d.h_out, d.w_out), (32, 32));
        let d = ConvDims::new(1, 3, 64, 64, 16, 3, 1, 1).unwrap();
        assert_eq!((d.h_out, d.w_out), (64, 64));
        assert!(ConvDims::new(1, 1, 1, 1, 1, 3, 1, 0).is_none());
    }

    #[test]
    fn gemm_path_matches_naive_convolution() {
        for &(n, c_in, h, w, c_out, k, stride, pad) in &[
            (1usize, 1usize, 5usize, 5usize, 1usize, 3usize, 1usize, 1usize),
            (2, 3, 8, 7, 4, 3, 1, 1),
            (2, 3, 9, 9, 5, 3, 2, 1),
            (1, 2, 6, 6, 3, 1, 1, 0),
            (3, 4, 11, 5, 2, 3, 2, 0),
        ] {
            let d = ConvDims::new(n, c_in, h, w, c_out, k, stride, pad).unwrap();
            let x = pseudo_random(n * c_in * h * w, 1);
            let wt = pseudo_random(c_out * c_in * k * k, 2);
            let b = pseudo_random(c_out, 3);
            let fast = conv2d_forward(&x, &wt, &b, &d);
            let slow = conv2d_naive(&x, &wt, &b, &d);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "config {:?}", (n, c_in, h, w, c_out, k, stride, pad));
            }
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        // 1x1 kernel with weight 1 and zero bias is the identity map.
        let d = ConvDims::new(1, 1, 4, 4, 1, 1, 1, 0).unwrap();
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let out = conv2d_forward(&x, &[1.0], &[0.0], &d);
        assert_eq!(out, x);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let d = ConvDims::new(2, 2, 6, 5, 3, 3, 2, 1).unwrap();
        let x = pseudo_random(d.n * d.c_in * d.h * d.w, 7);
        let wt = pseudo_random(d.c_out * d.c_in * d.k * d.k, 8);
        let b = pseudo_random(d.c_out, 9);
        // scalar objective: weighted sum of outputs with fixed coefficients
        let coeff = pseudo_random(d.n * d.c_out * d.h_out * d.w_out, 10);
        let f = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            conv2d_forward(x, w, b, &d).iter().zip(&coeff).map(|(o, c)| o * c).sum()
        };
        let (dx, dw, db) = conv2d_backward(&x, &wt, &coeff, &d, true);

        let h = 1e-6;
        let check = |analytic: &[f64], base: &[f64], which: usize| {
            for i in 0..analytic.len() {
                let mut plus = base.to_vec();
                let mut minus = base.to_vec();
                plus[i] += h;
                minus[i] -= h;
                let (fp, fm) = match which {
                    0 => (f(&plus, &wt, &b), f(&minus, &wt, &b)),
                    1 => (f(&x, &plus, &b), f(&x, &minus, &b)),
                    _ => (f(&x, &wt, &plus), f(&x, &wt, &minus)),
                };
                let fd = (fp - fm) / (2.0 * h);
                let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((analytic[i] - fd) / denom).abs() < 1e-5,
                    "arg {which} index {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        };
        check(&dx, &x, 0);
        check(&dw, &wt, 1);
        check(&db, &b, 2);
    }
}
