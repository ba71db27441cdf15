//! 2-D convolution via im2col and GEMM.
//!
//! Tensors are NCHW, weights are (out, in, k, k). One multiply-accumulate per
//! kernel tap; padding is zero-fill. Samples are processed sequentially with
//! a reused column buffer, keeping results bit-deterministic.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayBase, ArrayView3, ArrayViewMut3, Axis, Data, Ix1, Ix4};

/// Output spatial size of a convolution over an `h`×`w` input.
pub fn conv2d_output_shape(
    (h, w): (usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    ((h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1)
}

/// Unrolls one sample into a (C·k·k) × (Ho·Wo) column matrix.
fn im2col(
    x: ArrayView3<'_, f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut Array2<f64>,
) {
    let (c, h, w) = x.dim();
    debug_assert_eq!(cols.dim(), (c * kernel * kernel, ho * wo));
    for ch in 0..c {
        let plane = x.index_axis(Axis(0), ch);
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let mut row_view = cols.row_mut(row);
                let row_slice = row_view.as_slice_mut().expect("contiguous row");
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let base = oi * wo;
                    if ii < 0 || ii >= h as isize {
                        row_slice[base..base + wo].fill(0.0);
                        continue;
                    }
                    let src = plane.row(ii as usize);
                    let src = src.as_slice().expect("contiguous plane row");
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        row_slice[base + oj] = if jj >= 0 && jj < w as isize {
                            src[jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatters a column-gradient matrix back onto one input sample, accumulating
/// overlapping taps.
fn col2im_accumulate(
    cols: &Array2<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    mut dx: ArrayViewMut3<'_, f64>,
) {
    let (c, h, w) = dx.dim();
    for ch in 0..c {
        let mut plane = dx.index_axis_mut(Axis(0), ch);
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let row_view = cols.row(row);
                let row_slice = row_view.as_slice().expect("contiguous row");
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            plane[[ii as usize, jj as usize]] += row_slice[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<Sw, Sb>(
    x: &Array4<f64>,
    weight: &ArrayBase<Sw, Ix4>,
    bias: &ArrayBase<Sb, Ix1>,
    stride: usize,
    pad: usize,
) -> Array4<f64>
where
    Sw: Data<Elem = f64>,
    Sb: Data<Elem = f64>,
{
    let (batch, cin, h, w) = x.dim();
    let (cout, wcin, kernel, _) = weight.dim();
    debug_assert_eq!(cin, wcin);
    let (ho, wo) = conv2d_output_shape((h, w), kernel, stride, pad);

    let w_mat = weight
        .view()
        .into_shape_with_order((cout, cin * kernel * kernel))
        .expect("standard-layout weight");
    let mut cols = Array2::<f64>::zeros((cin * kernel * kernel, ho * wo));
    let mut y = Array4::<f64>::zeros((batch, cout, ho, wo));

    for s in 0..batch {
        im2col(x.index_axis(Axis(0), s), kernel, stride, pad, (ho, wo), &mut cols);
        let mut y_mat = y
            .index_axis_mut(Axis(0), s)
            .into_shape_with_order((cout, ho * wo))
            .expect("contiguous sample");
        general_mat_mul(1.0, &w_mat, &cols, 0.0, &mut y_mat);
        for (mut row, &b) in y_mat.rows_mut().into_iter().zip(bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
    }
    y
}

/// Gradients of a convolution: returns (dx, dweight, dbias).
pub fn conv2d_backward<Sw>(
    dy: &Array4<f64>,
    x: &Array4<f64>,
    weight: &ArrayBase<Sw, Ix4>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>)
where
    Sw: Data<Elem = f64>,
{
    let (batch, cin, h, w) = x.dim();
    let (cout, _, kernel, _) = weight.dim();
    let (ho, wo) = conv2d_output_shape((h, w), kernel, stride, pad);

    let taps = cin * kernel * kernel;
    let w_mat = weight
        .view()
        .into_shape_with_order((cout, taps))
        .expect("standard-layout weight");

    let mut dx = Array4::<f64>::zeros(x.raw_dim());
    let mut dw = Array4::<f64>::zeros(weight.raw_dim());
    let mut db = Array1::<f64>::zeros(cout);
    let mut cols = Array2::<f64>::zeros((taps, ho * wo));
    let mut dcols = Array2::<f64>::zeros((taps, ho * wo));

    {
        let mut dw_mat = dw
            .view_mut()
            .into_shape_with_order((cout, taps))
            .expect("standard-layout weight");
        for s in 0..batch {
            im2col(x.index_axis(Axis(0), s), kernel, stride, pad, (ho, wo), &mut cols);
            let dy_mat = dy
                .index_axis(Axis(0), s)
                .into_shape_with_order((cout, ho * wo))
                .expect("contiguous sample");
            general_mat_mul(1.0, &dy_mat, &cols.t(), 1.0, &mut dw_mat);
            for (row, acc) in dy_mat.rows().into_iter().zip(db.iter_mut()) {
                *acc += row.sum();
            }
            general_mat_mul(1.0, &w_mat.t(), &dy_mat, 0.0, &mut dcols);
            col2im_accumulate(
                &dcols,
                kernel,
                stride,
                pad,
                (ho, wo),
                dx.index_axis_mut(Axis(0), s),
            );
        }
    }
    (dx, dw, db)
}
