use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

use super::Window;

/// Lower `input` into a `(out_h * out_w, kh * kw * c)` patch matrix. Column
/// order is `(ky, kx, c)`, matching a `(kh, kw, cin, cout)` kernel flattened
/// to two dimensions.
fn im2col(input: ArrayView3<f64>, win: &Window) -> Array2<f64> {
    let (_, _, c) = input.dim();
    let (oh, ow) = win.output();
    let (kh, kw) = (win.rows.kernel, win.cols.kernel);
    let mut cols = Array2::<f64>::zeros((oh * ow, kh * kw * c));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut row = cols.row_mut(oy * ow + ox);
            let row = row.as_slice_mut().expect("fresh array is contiguous");
            for ky in 0..kh {
                let Some(iy) = win.rows.source(oy, ky) else { continue };
                for kx in 0..kw {
                    let Some(ix) = win.cols.source(ox, kx) else { continue };
                    let dst = (ky * kw + kx) * c;
                    for (d, v) in row[dst..dst + c].iter_mut().zip(input.slice(s![iy, ix, ..]).iter()) {
                        *d = *v;
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, win: &Window, channels: usize) -> Array3<f64> {
    let (oh, ow) = win.output();
    let (kh, kw) = (win.rows.kernel, win.cols.kernel);
    let mut grad = Array3::<f64>::zeros((win.rows.input, win.cols.input, channels));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = cols.row(oy * ow + ox);
            for ky in 0..kh {
                let Some(iy) = win.rows.source(oy, ky) else { continue };
                for kx in 0..kw {
                    let Some(ix) = win.cols.source(ox, kx) else { continue };
                    let src = (ky * kw + kx) * channels;
                    let mut dst = grad.slice_mut(s![iy, ix, ..]);
                    dst += &row.slice(s![src..src + channels]);
                }
            }
        }
    }
    grad
}

fn is_pointwise(win: &Window) -> bool {
    win.rows.kernel == 1
        && win.cols.kernel == 1
        && win.rows.stride == 1
        && win.cols.stride == 1
        && win.rows.pad_before == 0
        && win.cols.pad_before == 0
}

/// 2-D convolution (cross-correlation, as in every deep learning framework).
///
/// `kernel` is the `(kh * kw * cin, cout)` flattening of a `(kh, kw, cin,
/// cout)` filter bank.
pub fn conv2d(
    input: ArrayView3<f64>,
    kernel: ArrayView2<f64>,
    bias: Option<ArrayView1<f64>>,
    win: &Window,
) -> Array3<f64> {
    let (h, w, c) = input.dim();
    let (oh, ow) = win.output();
    let cout = kernel.ncols();
    let mut out = if is_pointwise(win) {
        match input.as_standard_layout().into_shape((h * w, c)) {
            Ok(flat) => flat.dot(&kernel),
            Err(_) => unreachable!("standard layout reshapes"),
        }
    } else {
        im2col(input, win).dot(&kernel)
    };
    if let Some(b) = bias {
        out += &b;
    }
    out.into_shape((oh, ow, cout)).expect("matmul output is contiguous")
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(
    grad_out: ArrayView3<f64>,
    kernel: ArrayView2<f64>,
    win: &Window,
    in_channels: usize,
) -> Array3<f64> {
    let (oh, ow, cout) = grad_out.dim();
    let g = grad_out
        .as_standard_layout()
        .into_owned()
        .into_shape((oh * ow, cout))
        .expect("standard layout");
    let gcols = g.dot(&kernel.t());
    if is_pointwise(win) {
        gcols.into_shape((oh, ow, in_channels)).expect("contiguous")
    } else {
        col2im(&gcols, win, in_channels)
    }
}

/// Depthwise convolution with channel multiplier 1. `kernel` has shape
/// `(kh, kw, c, 1)` as stored by Keras.
pub fn depthwise2d(input: ArrayView3<f64>, kernel: ArrayView4<f64>, win: &Window) -> Array3<f64> {
    let (_, _, c) = input.dim();
    let (oh, ow) = win.output();
    let k = kernel.index_axis(Axis(3), 0);
    let mut out = Array3::<f64>::zeros((oh, ow, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = out.slice_mut(s![oy, ox, ..]);
            for ky in 0..win.rows.kernel {
                let Some(iy) = win.rows.source(oy, ky) else { continue };
                for kx in 0..win.cols.kernel {
                    let Some(ix) = win.cols.source(ox, kx) else { continue };
                    let taps = k.slice(s![ky, kx, ..]);
                    ndarray::Zip::from(&mut acc)
                        .and(input.slice(s![iy, ix, ..]))
                        .and(taps)
                        .for_each(|a, &x, &t| *a += x * t);
                }
            }
        }
    }
    out
}

/// Gradient of [`depthwise2d`] with respect to its input.
pub fn depthwise2d_input_grad(grad_out: ArrayView3<f64>, kernel: ArrayView4<f64>, win: &Window) -> Array3<f64> {
    let (oh, ow, c) = grad_out.dim();
    let k = kernel.index_axis(Axis(3), 0);
    let mut grad = Array3::<f64>::zeros((win.rows.input, win.cols.input, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let g = grad_out.slice(s![oy, ox, ..]);
            for ky in 0..win.rows.kernel {
                let Some(iy) = win.rows.source(oy, ky) else { continue };
                for kx in 0..win.cols.kernel {
                    let Some(ix) = win.cols.source(ox, kx) else { continue };
                    ndarray::Zip::from(grad.slice_mut(s![iy, ix, ..]))
                        .and(g)
                        .and(k.slice(s![ky, kx, ..]))
                        .for_each(|d, &g, &t| *d += g * t);
                }
            }
        }
    }
    grad
}
