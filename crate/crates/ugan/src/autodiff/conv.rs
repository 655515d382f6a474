//! Batched 2-D convolution kernels (im2col + GEMM), plus the two adjoint
//! maps needed by the tape: the input-gradient map (also used directly as
//! transposed convolution) and the weight-gradient map.
//!
//! All three are bilinear, and their vector-Jacobian products are again one
//! of the three maps, so the op set is closed under repeated
//! differentiation.
//!
//! Parallelism is per-sample over the batch; every output element is
//! written by exactly one thread and reductions run in a fixed order, so
//! results are bit-identical from run to run.

use ndarray::{linalg::general_mat_mul, s, Array2, Array4, ArrayView2, ArrayView3, ArrayView4};
use rayon::prelude::*;

use super::tape::Scalar;

/// Output spatial size of a strided convolution (floor semantics).
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Spatial size produced by the input-gradient map (transposed convolution).
pub fn conv_transpose_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

fn im2col<F: Scalar>(
    x: &ArrayView3<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut Array2<F>,
) {
    let (c, h, w) = x.dim();
    let xs = x.as_slice().expect("im2col: input must be contiguous");
    let cs = col.as_slice_mut().expect("im2col: col must be contiguous");
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let dst_row = &mut cs[r * p..(r + 1) * p];
                for oh in 0..ho {
                    let iy = (oh * stride + ky) as isize - pad as isize;
                    let dst = &mut dst_row[oh * wo..(oh + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize) * w + w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let ix = (ow * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add column entries back into image layout.
fn col2im_add<F: Scalar>(
    col: &ArrayView2<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    c: usize,
    h: usize,
    w: usize,
    out: &mut [F],
) {
    let cs = col.as_slice().expect("col2im: col must be contiguous");
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let src_row = &cs[r * p..(r + 1) * p];
                for oh in 0..ho {
                    let iy = (oh * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut out[(ci * h + iy as usize) * w..(ci * h + iy as usize) * w + w];
                    let src = &src_row[oh * wo..(oh + 1) * wo];
                    for (ow, v) in src.iter().enumerate() {
                        let ix = (ow * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + *v;
                        }
                    }
                }
            }
        }
    }
}

/// y[n,o,p] = sum_{i,k} x[n,i,sp+k-pad] * w[o,i,k]
pub fn conv2d<F: Scalar>(
    x: &ArrayView4<'_, F>,
    w: &ArrayView4<'_, F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, ci, h, wd) = x.dim();
    let (co, ci2, kh, kw) = w.dim();
    assert_eq!(ci, ci2, "conv2d: channel mismatch");
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(wd, kw, stride, pad);
    let k = ci * kh * kw;
    let wmat_owned;
    let wmat: ArrayView2<'_, F> = match w.to_shape((co, k)) {
        Ok(v) => {
            wmat_owned = v;
            wmat_owned.view()
        }
        Err(_) => unreachable!("conv weights are contiguous"),
    };
    let mut out = Array4::<F>::zeros((n, co, ho, wo));
    let x_samples: Vec<ArrayView3<'_, F>> = x.outer_iter().collect();
    out.outer_iter_mut()
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .zip(x_samples.into_par_iter())
        .for_each(|(mut on, xn)| {
            let mut col = Array2::<F>::zeros((k, ho * wo));
            im2col(&xn, kh, kw, stride, pad, ho, wo, &mut col);
            let mut o2 = on
                .view_mut()
                .into_shape_with_order((co, ho * wo))
                .expect("conv2d: output contiguous");
            general_mat_mul(F::one(), &wmat, &col.view(), F::zero(), &mut o2);
        });
    out
}

/// Input-gradient map of [`conv2d`]; equivalently a transposed convolution
/// of `g` by `w`. `hw` is the spatial size of the produced tensor.
pub fn conv2d_input_grad<F: Scalar>(
    g: &ArrayView4<'_, F>,
    w: &ArrayView4<'_, F>,
    stride: usize,
    pad: usize,
    hw: (usize, usize),
) -> Array4<F> {
    let (n, co, ho, wo) = g.dim();
    let (co2, ci, kh, kw) = w.dim();
    assert_eq!(co, co2, "conv2d_input_grad: channel mismatch");
    let (h, wd) = hw;
    debug_assert_eq!(conv_out_size(h, kh, stride, pad), ho);
    debug_assert_eq!(conv_out_size(wd, kw, stride, pad), wo);
    let k = ci * kh * kw;
    let wmat_owned = w.to_shape((co, k)).expect("conv weights are contiguous");
    let wmat_t = wmat_owned.t();
    let mut out = Array4::<F>::zeros((n, ci, h, wd));
    let g_samples: Vec<ArrayView3<'_, F>> = g.outer_iter().collect();
    out.outer_iter_mut()
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .zip(g_samples.into_par_iter())
        .for_each(|(mut xn, gn)| {
            let g2 = gn
                .into_shape_with_order((co, ho * wo))
                .expect("grad contiguous");
            let mut colg = Array2::<F>::zeros((k, ho * wo));
            general_mat_mul(F::one(), &wmat_t, &g2, F::zero(), &mut colg);
            let xs = xn
                .as_slice_mut()
                .expect("conv2d_input_grad: output contiguous");
            col2im_add(&colg.view(), kh, kw, stride, pad, ho, wo, ci, h, wd, xs);
        });
    out
}

/// Weight-gradient map of [`conv2d`]: correlation of `x` with `g`, summed
/// over the batch in index order.
pub fn conv2d_weight_grad<F: Scalar>(
    x: &ArrayView4<'_, F>,
    g: &ArrayView4<'_, F>,
    stride: usize,
    pad: usize,
    khw: (usize, usize),
) -> Array4<F> {
    let (n, ci, h, wd) = x.dim();
    let (n2, co, ho, wo) = g.dim();
    assert_eq!(n, n2, "conv2d_weight_grad: batch mismatch");
    let (kh, kw) = khw;
    debug_assert_eq!(conv_out_size(h, kh, stride, pad), ho);
    debug_assert_eq!(conv_out_size(wd, kw, stride, pad), wo);
    let k = ci * kh * kw;
    let per_sample: Vec<Array2<F>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xn = x.slice(s![i, .., .., ..]);
            let gn = g.slice(s![i, .., .., ..]);
            let mut col = Array2::<F>::zeros((k, ho * wo));
            im2col(&xn, kh, kw, stride, pad, ho, wo, &mut col);
            let g2 = gn
                .into_shape_with_order((co, ho * wo))
                .expect("grad contiguous");
            let mut gw = Array2::<F>::zeros((co, k));
            general_mat_mul(F::one(), &g2, &col.t(), F::zero(), &mut gw);
            gw
        })
        .collect();
    let mut total = Array2::<F>::zeros((co, k));
    for gw in per_sample {
        total += &gw;
    }
    total
        .into_shape_with_order((co, ci, kh, kw))
        .expect("weight grad contiguous")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn conv2d_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, ci, h, wd) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let ho = conv_out_size(h, kh, stride, pad);
        let wo = conv_out_size(wd, kw, stride, pad);
        let mut out = Array4::<f64>::zeros((n, co, ho, wo));
        for b in 0..n {
            for o in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oh * stride + ky) as isize - pad as isize;
                                    let ix = (ow * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x[[b, i, iy as usize, ix as usize]]
                                            * w[[o, i, ky as usize, kx as usize]];
                                    }
                                }
                            }
                        }
                        out[[b, o, oh, ow]] = acc;
                    }
                }
            }
        }
        out
    }

    fn arange4(shape: (usize, usize, usize, usize), scale: f64) -> Array4<f64> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Array4::from_shape_vec(
            shape,
            (0..len).map(|i| ((i * 37 % 19) as f64 - 9.0) * scale).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv2d_matches_naive() {
        for &(stride, pad, kh) in &[(1usize, 1usize, 3usize), (2, 1, 4), (1, 3, 7)] {
            let x = arange4((2, 3, 8, 8), 0.1);
            let w = arange4((4, 3, kh, kh), 0.05);
            let fast = conv2d(&x.view(), &w.view(), stride, pad);
            let slow = conv2d_naive(&x, &w, stride, pad);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn input_grad_is_adjoint_of_forward() {
        // <g, conv(x,w)> == <conv_input_grad(g,w), x> for random tensors.
        let x = arange4((2, 3, 6, 6), 0.1);
        let w = arange4((5, 3, 4, 4), 0.03);
        let y = conv2d(&x.view(), &w.view(), 2, 1);
        let g = arange4(y.dim(), 0.07);
        let gx = conv2d_input_grad(&g.view(), &w.view(), 2, 1, (6, 6));
        let lhs: f64 = (&g * &y).sum();
        let rhs: f64 = (&gx * &x).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn weight_grad_is_adjoint_of_forward() {
        let x = arange4((2, 3, 6, 6), 0.1);
        let w = arange4((5, 3, 3, 3), 0.03);
        let y = conv2d(&x.view(), &w.view(), 1, 1);
        let g = arange4(y.dim(), 0.07);
        let gw = conv2d_weight_grad(&x.view(), &g.view(), 1, 1, (3, 3));
        let lhs: f64 = (&g * &y).sum();
        let rhs: f64 = (&gw * &w).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
