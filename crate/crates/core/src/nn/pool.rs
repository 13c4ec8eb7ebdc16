use ndarray::{Array3, ArrayView3};

use super::Window;

/// Max pooling. Padded positions never win.
pub fn max_pool(input: ArrayView3<f64>, win: &Window) -> Array3<f64> {
    let c = input.dim().2;
    let (oh, ow) = win.output();
    Array3::from_shape_fn((oh, ow, c), |(oy, ox, ch)| {
        let mut best = f64::NEG_INFINITY;
        for ky in 0..win.rows.kernel {
            let Some(iy) = win.rows.source(oy, ky) else { continue };
            for kx in 0..win.cols.kernel {
                let Some(ix) = win.cols.source(ox, kx) else { continue };
                best = best.max(input[[iy, ix, ch]]);
            }
        }
        best
    })
}

/// Routes each output gradient to the first maximal input of its window.
pub fn max_pool_input_grad(input: ArrayView3<f64>, grad_out: ArrayView3<f64>, win: &Window) -> Array3<f64> {
    let mut grad = Array3::<f64>::zeros(input.dim());
    let (oh, ow, c) = grad_out.dim();
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut at = None;
                for ky in 0..win.rows.kernel {
                    let Some(iy) = win.rows.source(oy, ky) else { continue };
                    for kx in 0..win.cols.kernel {
                        let Some(ix) = win.cols.source(ox, kx) else { continue };
                        let v = input[[iy, ix, ch]];
                        if v > best {
                            best = v;
                            at = Some((iy, ix));
                        }
                    }
                }
                if let Some((iy, ix)) = at {
                    grad[[iy, ix, ch]] += grad_out[[oy, ox, ch]];
                }
            }
        }
    }
    grad
}

fn window_count(win: &Window, oy: usize, ox: usize) -> usize {
    let rows = (0..win.rows.kernel)
        .filter(|&k| win.rows.source(oy, k).is_some())
        .count();
    let cols = (0..win.cols.kernel)
        .filter(|&k| win.cols.source(ox, k).is_some())
        .count();
    rows * cols
}

/// Average pooling; the divisor counts only non-padded positions.
pub fn avg_pool(input: ArrayView3<f64>, win: &Window) -> Array3<f64> {
    let c = input.dim().2;
    let (oh, ow) = win.output();
    Array3::from_shape_fn((oh, ow, c), |(oy, ox, ch)| {
        let mut sum = 0.0;
        for ky in 0..win.rows.kernel {
            let Some(iy) = win.rows.source(oy, ky) else { continue };
            for kx in 0..win.cols.kernel {
                let Some(ix) = win.cols.source(ox, kx) else { continue };
                sum += input[[iy, ix, ch]];
            }
        }
        sum / window_count(win, oy, ox) as f64
    })
}

pub fn avg_pool_input_grad(grad_out: ArrayView3<f64>, win: &Window) -> Array3<f64> {
    let (oh, ow, c) = grad_out.dim();
    let mut grad = Array3::<f64>::zeros((win.rows.input, win.cols.input, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let n = window_count(win, oy, ox) as f64;
            for ky in 0..win.rows.kernel {
                let Some(iy) = win.rows.source(oy, ky) else { continue };
                for kx in 0..win.cols.kernel {
                    let Some(ix) = win.cols.source(ox, kx) else { continue };
                    for ch in 0..c {
                        grad[[iy, ix, ch]] += grad_out[[oy, ox, ch]] / n;
                    }
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Padding;
    use ndarray::array;

    #[test]
    fn avg_pool_same_excludes_padding() {
        let x = array![[[1.0], [2.0]], [[3.0], [4.0]]];
        let win = Window::new((2, 2), (3, 3), (1, 1), Padding::Same).unwrap();
        let y = avg_pool(x.view(), &win);
        // every window covers all four valid cells
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = array![[[1.0], [5.0]], [[3.0], [4.0]]];
        let win = Window::new((2, 2), (2, 2), (2, 2), Padding::Valid).unwrap();
        let y = max_pool(x.view(), &win);
        assert_eq!(y[[0, 0, 0]], 5.0);
        let g = max_pool_input_grad(x.view(), array![[[2.0]]].view(), &win);
        assert_eq!(g, array![[[0.0], [2.0]], [[0.0], [0.0]]]);
    }
}
