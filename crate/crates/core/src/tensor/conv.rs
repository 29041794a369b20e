//! im2col convolution. Patches are unrolled into a (B * Ho * Wo, Cin * kh * kw)
//! matrix so the whole batch runs as one gemm; the backward pass reuses the
//! same unrolling (columns are recomputed rather than stored, trading a little
//! compute for tape memory).

use super::Scalar;
use ndarray::{Array2, ArrayD, Ix2, IxDyn};

pub struct ConvDims {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

pub fn dims(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> ConvDims {
    assert_eq!(x_shape.len(), 4, "conv2d: input must be (B, Cin, H, W)");
    assert_eq!(w_shape.len(), 4, "conv2d: weight must be (Cout, Cin, kh, kw)");
    assert_eq!(x_shape[1], w_shape[1], "conv2d: channel mismatch");
    assert!(stride >= 1, "conv2d: stride must be positive");
    let (b, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than padded input");
    ConvDims {
        b,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w + 2 * pad - kw) / stride + 1,
    }
}

fn im2col<F: Scalar>(x: &ArrayD<F>, d: &ConvDims, stride: usize, pad: usize) -> Array2<F> {
    let mut cols = Array2::<F>::zeros((d.b * d.ho * d.wo, d.cin * d.kh * d.kw));
    let xs = x.as_slice().expect("im2col: input not contiguous");
    let cs = cols.as_slice_mut().unwrap();
    let row_w = d.cin * d.kh * d.kw;
    for b in 0..d.b {
        for oh in 0..d.ho {
            for ow in 0..d.wo {
                let row = (b * d.ho + oh) * d.wo + ow;
                for ci in 0..d.cin {
                    for dh in 0..d.kh {
                        let ih = oh * stride + dh;
                        if ih < pad || ih - pad >= d.h {
                            continue;
                        }
                        let x_base = ((b * d.cin + ci) * d.h + (ih - pad)) * d.w;
                        let c_base = row * row_w + (ci * d.kh + dh) * d.kw;
                        for dw in 0..d.kw {
                            let iw = ow * stride + dw;
                            if iw < pad || iw - pad >= d.w {
                                continue;
                            }
                            cs[c_base + dw] = xs[x_base + (iw - pad)];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(dcols: &Array2<F>, d: &ConvDims, stride: usize, pad: usize) -> ArrayD<F> {
    let mut dx = ArrayD::<F>::zeros(IxDyn(&[d.b, d.cin, d.h, d.w]));
    let xs = dx.as_slice_mut().unwrap();
    let cs = dcols.as_slice().expect("col2im: grad not contiguous");
    let row_w = d.cin * d.kh * d.kw;
    for b in 0..d.b {
        for oh in 0..d.ho {
            for ow in 0..d.wo {
                let row = (b * d.ho + oh) * d.wo + ow;
                for ci in 0..d.cin {
                    for dh in 0..d.kh {
                        let ih = oh * stride + dh;
                        if ih < pad || ih - pad >= d.h {
                            continue;
                        }
                        let x_base = ((b * d.cin + ci) * d.h + (ih - pad)) * d.w;
                        let c_base = row * row_w + (ci * d.kh + dh) * d.kw;
                        for dw in 0..d.kw {
                            let iw = ow * stride + dw;
                            if iw < pad || iw - pad >= d.w {
                                continue;
                            }
                            xs[x_base + (iw - pad)] = xs[x_base + (iw - pad)] + cs[c_base + dw];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d_forward<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    stride: usize,
    pad: usize,
) -> ArrayD<F> {
    let d = dims(x.shape(), w.shape(), stride, pad);
    let cols = im2col(x, &d, stride, pad);
    let w_mat = w
        .view()
        .into_shape_with_order((d.cout, d.cin * d.kh * d.kw))
        .expect("conv2d: weight not contiguous");
    // (B*Ho*Wo, CinK) x (CinK, Cout) -> rows are output sites.
    let out_rows = cols.dot(&w_mat.t());
    let out = out_rows
        .into_shape_with_order((d.b, d.ho, d.wo, d.cout))
        .unwrap()
        .permuted_axes([0, 3, 1, 2]);
    super::standardize(out.into_dyn())
}

pub fn conv2d_backward<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    g: &ArrayD<F>,
    stride: usize,
    pad: usize,
) -> (ArrayD<F>, ArrayD<F>) {
    let d = dims(x.shape(), w.shape(), stride, pad);
    let g_rows = super::standardize(g.clone().permuted_axes(IxDyn(&[0, 2, 3, 1])))
        .into_shape_with_order(IxDyn(&[d.b * d.ho * d.wo, d.cout]))
        .unwrap()
        .into_dimensionality::<Ix2>()
        .unwrap();
    let cols = im2col(x, &d, stride, pad);
    let w_mat = w
        .view()
        .into_shape_with_order((d.cout, d.cin * d.kh * d.kw))
        .expect("conv2d: weight not contiguous");
    let dw = g_rows
        .t()
        .dot(&cols)
        .into_shape_with_order((d.cout, d.cin, d.kh, d.kw))
        .unwrap()
        .into_dyn();
    let dcols = g_rows.dot(&w_mat);
    let dx = col2im(&dcols, &d, stride, pad);
    (dx, dw)
}
