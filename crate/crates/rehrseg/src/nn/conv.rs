//! Stride-1 zero-padded 3D convolution, forward and backward, via im2col and
//! matrix multiplication.
//!
//! Layouts: activations `(N, C, D, H, W)`, weights `(Co, Ci, kd, kh, kw)`,
//! bias `(Co)`. The input gradient is itself a convolution with the
//! flipped/transposed kernel, so it reuses the forward path.

use super::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};

/// Gathers all receptive fields of one item into a `(Ci*kd*kh*kw, OD*OH*OW)`
/// matrix. Row order matches the standard-layout flattening of the weights.
fn im2col<F: Scalar>(
    x: &ArrayViewD<F>, // (Ci, D, H, W)
    kshape: (usize, usize, usize),
    pad: (usize, usize, usize),
    out_dims: (usize, usize, usize),
    col: &mut Array2<F>,
) {
    let (ci_n, d, h, w) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let (kd, kh, kw) = kshape;
    let (pd, ph, pw) = pad;
    let (od, oh, ow) = out_dims;
    col.fill(F::zero());
    let x_slice = x.as_slice().expect("im2col input must be standard layout");
    let col_slice = col.as_slice_mut().unwrap();
    let cols = od * oh * ow;
    for ci in 0..ci_n {
        for kdi in 0..kd {
            for khi in 0..kh {
                for kwi in 0..kw {
                    let row = ((ci * kd + kdi) * kh + khi) * kw + kwi;
                    let row_base = row * cols;
                    // Valid output x-range for this tap.
                    let ow_lo = pw.saturating_sub(kwi);
                    let ow_hi = (w + pw - kwi).min(ow);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for odi in 0..od {
                        let id = odi + kdi;
                        if id < pd || id - pd >= d {
                            continue;
                        }
                        let id = id - pd;
                        for ohi in 0..oh {
                            let ih = ohi + khi;
                            if ih < ph || ih - ph >= h {
                                continue;
                            }
                            let ih = ih - ph;
                            let src_base = ((ci * d + id) * h + ih) * w + (ow_lo + kwi - pw);
                            let dst_base = row_base + (odi * oh + ohi) * ow + ow_lo;
                            let len = ow_hi - ow_lo;
                            col_slice[dst_base..dst_base + len]
                                .copy_from_slice(&x_slice[src_base..src_base + len]);
                        }
                    }
                }
            }
        }
    }
}

fn out_dims(
    in_dims: (usize, usize, usize),
    kshape: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> (usize, usize, usize) {
    let f = |n: usize, k: usize, p: usize| {
        assert!(n + 2 * p + 1 > k, "conv3d: input too small for kernel");
        n + 2 * p + 1 - k
    };
    (
        f(in_dims.0, kshape.0, pad.0),
        f(in_dims.1, kshape.1, pad.1),
        f(in_dims.2, kshape.2, pad.2),
    )
}

pub fn conv3d_fwd<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    bias: Option<&ArrayD<F>>,
    pad: (usize, usize, usize),
) -> ArrayD<F> {
    let x_std;
    let x = if x.is_standard_layout() {
        x
    } else {
        x_std = x.as_standard_layout().to_owned();
        &x_std
    };
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 5, "conv3d input must be (N, Ci, D, H, W)");
    assert_eq!(ws.len(), 5, "conv3d weight must be (Co, Ci, kd, kh, kw)");
    assert_eq!(xs[1], ws[1], "channel mismatch");
    let (n, ci, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (co, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let (od, oh, ow) = out_dims((d, h, wd), (kd, kh, kw), pad);
    let k = ci * kd * kh * kw;
    let m = od * oh * ow;

    let w_mat = w
        .view()
        .into_shape_with_order((co, k))
        .expect("weights standard layout");
    let mut out = ArrayD::<F>::zeros(IxDyn(&[n, co, od, oh, ow]));
    let mut col = Array2::<F>::zeros((k, m));
    let mut y_mat = Array2::<F>::zeros((co, m));
    for ni in 0..n {
        let item = x.index_axis(ndarray::Axis(0), ni);
        im2col(&item, (kd, kh, kw), pad, (od, oh, ow), &mut col);
        general_mat_mul(F::one(), &w_mat, &col.view(), F::zero(), &mut y_mat);
        if let Some(b) = bias {
            for (coi, mut row) in y_mat.rows_mut().into_iter().enumerate() {
                let bv = b[[coi]];
                row.mapv_inplace(|v| v + bv);
            }
        }
        out.index_axis_mut(ndarray::Axis(0), ni)
            .into_shape_with_order((co, m))
            .unwrap()
            .assign(&y_mat);
    }
    let _ = wd;
    out
}

/// Kernel with swapped in/out channels and reversed spatial taps; convolving
/// the output gradient with it (at complementary padding) gives the input
/// gradient.
fn flip_transpose<F: Scalar>(w: &ArrayD<F>) -> ArrayD<F> {
    let ws = w.shape();
    let (co, ci, kd, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let mut out = ArrayD::<F>::zeros(IxDyn(&[ci, co, kd, kh, kw]));
    for o in 0..co {
        for i in 0..ci {
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        out[[i, o, kd - 1 - a, kh - 1 - b, kw - 1 - c]] = w[[o, i, a, b, c]];
                    }
                }
            }
        }
    }
    out
}

pub fn conv3d_grad_x<F: Scalar>(
    dy: &ArrayD<F>,
    w: &ArrayD<F>,
    pad: (usize, usize, usize),
) -> ArrayD<F> {
    let ws = w.shape();
    let wt = flip_transpose(w);
    let pad_t = (
        ws[2] - 1 - pad.0,
        ws[3] - 1 - pad.1,
        ws[4] - 1 - pad.2,
    );
    conv3d_fwd(dy, &wt, None, pad_t)
}

pub fn conv3d_grad_w<F: Scalar>(
    x: &ArrayD<F>,
    dy: &ArrayD<F>,
    pad: (usize, usize, usize),
    wshape: &[usize],
) -> ArrayD<F> {
    let x_std;
    let x = if x.is_standard_layout() {
        x
    } else {
        x_std = x.as_standard_layout().to_owned();
        &x_std
    };
    let dy_std;
    let dy = if dy.is_standard_layout() {
        dy
    } else {
        dy_std = dy.as_standard_layout().to_owned();
        &dy_std
    };
    let xs = x.shape();
    let (n, ci, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (co, kd, kh, kw) = (wshape[0], wshape[2], wshape[3], wshape[4]);
    let (od, oh, ow) = out_dims((d, h, wd), (kd, kh, kw), pad);
    let k = ci * kd * kh * kw;
    let m = od * oh * ow;
    let mut dw_mat = Array2::<F>::zeros((co, k));
    let mut col = Array2::<F>::zeros((k, m));
    for ni in 0..n {
        let item = x.index_axis(ndarray::Axis(0), ni);
        im2col(&item, (kd, kh, kw), pad, (od, oh, ow), &mut col);
        let dy_mat = dy
            .index_axis(ndarray::Axis(0), ni)
            .into_shape_with_order((co, m))
            .expect("dy standard layout");
        general_mat_mul(F::one(), &dy_mat, &col.t(), F::one(), &mut dw_mat);
    }
    dw_mat
        .into_shape_with_order(IxDyn(wshape))
        .unwrap()
}

pub fn conv3d_grad_b<F: Scalar>(dy: &ArrayD<F>) -> ArrayD<F> {
    let s = dy.shape();
    let co = s[1];
    let mut db = ArrayD::<F>::zeros(IxDyn(&[co]));
    for ni in 0..s[0] {
        for ci in 0..co {
            db[[ci]] = db[[ci]]
                + dy.index_axis(ndarray::Axis(0), ni)
                    .index_axis(ndarray::Axis(0), ci)
                    .sum();
        }
    }
    db
}
