//! Forward and input-gradient kernels for the conv / batchnorm / ReLU /
//! max-pool stack. Tensors are (B, C, H, W), row-major.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis};

use super::Tensor4;

/// Upper bound on im2col buffer elements; larger problems are processed in
/// column chunks.
const IM2COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.height * self.width
    }

    fn chunk(&self) -> usize {
        (IM2COL_BUDGET / self.patch_len().max(1)).clamp(1, self.positions())
    }
}

fn im2col(x: ArrayView3<f64>, g: &ConvGeometry, cols: std::ops::Range<usize>) -> Array2<f64> {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut out = Array2::<f64>::zeros((g.patch_len(), cols.len()));
    for c in 0..g.in_channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let mut dst = out.row_mut(row);
                for (k, p) in cols.clone().enumerate() {
                    let (h, w) = (p / g.width, p % g.width);
                    let (hh, ww) = (h + i, w + j);
                    if hh >= ph && ww >= pw && hh - ph < g.height && ww - pw < g.width {
                        dst[k] = x[[c, hh - ph, ww - pw]];
                    }
                }
            }
        }
    }
    out
}

fn col2im_add(cols: ArrayView2<f64>, g: &ConvGeometry, range: std::ops::Range<usize>, mut dx: ArrayViewMut3<f64>) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    for c in 0..g.in_channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = cols.row((c * g.kh + i) * g.kw + j);
                for (k, p) in range.clone().enumerate() {
                    let (h, w) = (p / g.width, p % g.width);
                    let (hh, ww) = (h + i, w + j);
                    if hh >= ph && ww >= pw && hh - ph < g.height && ww - pw < g.width {
                        dx[[c, hh - ph, ww - pw]] += row[k];
                    }
                }
            }
        }
    }
}

/// Same-padded, stride-1 convolution. `weights` is (out, in * kh * kw).
pub(crate) fn conv_forward(x: &Tensor4, weights: &Array2<f64>, bias: &Array1<f64>, kh: usize, kw: usize) -> Tensor4 {
    let (b, cin, h, w) = x.dim();
    let g = ConvGeometry { in_channels: cin, kh, kw, height: h, width: w };
    let cout = weights.nrows();
    let mut out = Array4::<f64>::zeros((b, cout, h, w));
    let chunk = g.chunk();
    for n in 0..b {
        let xb = x.index_axis(Axis(0), n);
        let mut ob = out.index_axis_mut(Axis(0), n);
        let mut ob = ob.view_mut().into_shape_with_order((cout, h * w)).expect("contiguous output");
        let mut start = 0;
        while start < g.positions() {
            let end = (start + chunk).min(g.positions());
            let cols = im2col(xb, &g, start..end);
            ob.slice_mut(s![.., start..end]).assign(&weights.dot(&cols));
            start = end;
        }
        for (mut row, &bval) in ob.axis_iter_mut(Axis(0)).zip(bias) {
            if bval != 0.0 {
                row += bval;
            }
        }
    }
    out
}

/// Gradient of the convolution with respect to its input.
pub(crate) fn conv_backward_input(dy: &Tensor4, weights: &Array2<f64>, in_channels: usize, kh: usize, kw: usize) -> Tensor4 {
    let (b, cout, h, w) = dy.dim();
    let g = ConvGeometry { in_channels, kh, kw, height: h, width: w };
    let wt = weights.t();
    let mut dx = Array4::<f64>::zeros((b, in_channels, h, w));
    let chunk = g.chunk();
    for n in 0..b {
        let dyb = dy.index_axis(Axis(0), n);
        let dyb = dyb.into_shape_with_order((cout, h * w)).expect("contiguous gradient");
        let mut start = 0;
        while start < g.positions() {
            let end = (start + chunk).min(g.positions());
            let dcols = wt.dot(&dyb.slice(s![.., start..end]));
            col2im_add(dcols.view(), &g, start..end, dx.index_axis_mut(Axis(0), n));
            start = end;
        }
    }
    dx
}

/// Per-channel normalisation state captured during the forward pass.
#[derive(Debug, Clone)]
pub(crate) struct BatchNormCache {
    /// Normalised input before the affine transform.
    pub xhat: Tensor4,
    pub inv_std: Array1<f64>,
    /// Whether the statistics came from the current batch (and so depend on it).
    pub batch_stats: bool,
}

pub(crate) struct BatchNormParams<'a> {
    pub scale: &'a Array1<f64>,
    pub shift: &'a Array1<f64>,
    pub running: Option<(&'a Array1<f64>, &'a Array1<f64>)>,
    pub eps: f64,
}

fn channel_count(x: &Tensor4) -> usize {
    let (b, _, h, w) = x.dim();
    b * h * w
}

pub(crate) fn batchnorm_forward(x: &Tensor4, p: &BatchNormParams) -> (Tensor4, BatchNormCache) {
    let c = x.dim().1;
    let count = channel_count(x) as f64;
    let (mean, var) = match p.running {
        Some((m, v)) => (m.clone(), v.clone()),
        None => {
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ch in 0..c {
                let view = x.index_axis(Axis(1), ch);
                let mu = view.sum() / count;
                mean[ch] = mu;
                var[ch] = view.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
            }
            (mean, var)
        }
    };
    let inv_std = var.mapv(|v| 1.0 / (v + p.eps).sqrt());
    let mut xhat = x.clone();
    let mut y = x.clone();
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        let (sc, sh) = (p.scale[ch], p.shift[ch]);
        xhat.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - mu) * is);
        ndarray::Zip::from(y.index_axis_mut(Axis(1), ch))
            .and(xhat.index_axis(Axis(1), ch))
            .for_each(|out, &n| *out = n * sc + sh);
    }
    (
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: p.running.is_none(),
        },
    )
}

pub(crate) fn batchnorm_backward(dy: &Tensor4, cache: &BatchNormCache, scale: &Array1<f64>) -> Tensor4 {
    let c = dy.dim().1;
    let count = channel_count(dy) as f64;
    let mut dx = dy.clone();
    for ch in 0..c {
        let g = scale[ch] * cache.inv_std[ch];
        let dyc = dy.index_axis(Axis(1), ch);
        let mut dxc = dx.index_axis_mut(Axis(1), ch);
        if cache.batch_stats {
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_dy = dyc.sum();
            let sum_dy_xh = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xh)
                .for_each(|o, &d, &n| *o = g * (d - (sum_dy + n * sum_dy_xh) / count));
        } else {
            dxc.mapv_inplace(|d| d * g);
        }
    }
    dx
}

pub(crate) fn relu_inplace(x: &mut Tensor4) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Masks `grad` where the ReLU output was not positive (ReLU'(0) = 0).
pub(crate) fn relu_backward_inplace(grad: &mut Tensor4, relu_out: &Tensor4) {
    ndarray::Zip::from(grad)
        .and(relu_out)
        .for_each(|g, &r| {
            if r <= 0.0 {
                *g = 0.0;
            }
        });
}

/// Non-overlapping max pooling with window = stride = (ph, pw), flooring the
/// output size. Returns the pooled tensor and the flat (h * W + w) argmax of
/// each window, first index winning ties.
pub(crate) fn maxpool_forward(x: &Tensor4, ph: usize, pw: usize) -> (Tensor4, Array4<u32>) {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / ph, w / pw);
    let mut out = Array4::<f64>::zeros((b, c, oh, ow));
    let mut arg = Array4::<u32>::zeros((b, c, oh, ow));
    for n in 0..b {
        for ch in 0..c {
            let plane = x.slice(s![n, ch, .., ..]);
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..ph {
                        for dj in 0..pw {
                            let (hh, ww) = (i * ph + di, j * pw + dj);
                            let v = plane[[hh, ww]];
                            if v > best {
                                best = v;
                                best_idx = hh * w + ww;
                            }
                        }
                    }
                    out[[n, ch, i, j]] = best;
                    arg[[n, ch, i, j]] = best_idx as u32;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(dy: &Tensor4, arg: &Array4<u32>, input_shape: (usize, usize, usize, usize)) -> Tensor4 {
    let (_, _, _, w) = input_shape;
    let mut dx = Array4::<f64>::zeros(input_shape);
    for ((n, ch, i, j), &g) in dy.indexed_iter() {
        let idx = arg[[n, ch, i, j]] as usize;
        dx[[n, ch, idx / w, idx % w]] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array};

    use super::*;

    fn direct_conv(x: &Tensor4, weights: &Array4<f64>) -> Tensor4 {
        let (b, cin, h, w) = x.dim();
        let (cout, _, kh, kw) = weights.dim();
        let mut out = Array4::zeros((b, cout, h, w));
        for n in 0..b {
            for o in 0..cout {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for i in 0..kh as isize {
                                for j in 0..kw as isize {
                                    let (sy, sx) = (y + i - kh as isize / 2, xx + j - kw as isize / 2);
                                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                        acc += weights[[o, c, i as usize, j as usize]] * x[[n, c, sy as usize, sx as usize]];
                                    }
                                }
                            }
                        }
                        out[[n, o, y as usize, xx as usize]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_loop_nest_2d() {
        let x = Array::from_shape_fn((2, 3, 5, 6), |(a, b, c, d)| ((a * 7 + b * 5 + c * 3 + d) % 11) as f64 - 5.0);
        let w4 = Array::from_shape_fn((4, 3, 3, 3), |(a, b, c, d)| ((a + 2 * b + 3 * c + 5 * d) % 7) as f64 / 7.0 - 0.5);
        let w2 = w4.clone().into_shape_with_order((4, 27)).unwrap();
        let got = conv_forward(&x, &w2, &Array1::zeros(4), 3, 3);
        let want = direct_conv(&x, &w4);
        assert!((&got - &want).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn conv_is_linear_in_input() {
        let x = Array::from_shape_fn((1, 2, 1, 9), |(_, b, _, d)| (b * 9 + d) as f64 * 0.1 - 0.7);
        let y = Array::from_shape_fn((1, 2, 1, 9), |(_, b, _, d)| ((b + 3 * d) % 5) as f64 - 2.0);
        let w = Array::from_shape_fn((3, 10), |(o, k)| ((o * 10 + k) % 7) as f64 / 3.0 - 1.0);
        let zero = Array1::zeros(3);
        let lhs = conv_forward(&(&x * 2.0 + &y * -3.0), &w, &zero, 1, 5);
        let rhs = conv_forward(&x, &w, &zero, 1, 5) * 2.0 - conv_forward(&y, &w, &zero, 1, 5) * 3.0;
        assert!((&lhs - &rhs).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn pool_floors_and_breaks_ties_to_first() {
        let x = array![[[[1.0, 1.0, 3.0, 2.0, 9.0]]]];
        let (p, arg) = maxpool_forward(&x, 1, 2);
        assert_eq!(p, array![[[[1.0, 3.0]]]]);
        assert_eq!(arg, array![[[[0u32, 2]]]]);
        let dx = maxpool_backward(&array![[[[5.0, 7.0]]]], &arg, x.dim());
        assert_eq!(dx, array![[[[5.0, 0.0, 7.0, 0.0, 0.0]]]]);
    }

    #[test]
    fn batchnorm_normalizes_channels() {
        let x = Array::from_shape_fn((2, 3, 1, 50), |(a, b, _, d)| ((a * 31 + b * 17 + d * 13) % 23) as f64 * (b + 1) as f64);
        let ones = Array1::ones(3);
        let zeros = Array1::zeros(3);
        let p = BatchNormParams { scale: &ones, shift: &zeros, running: None, eps: 1e-5 };
        let (y, _) = batchnorm_forward(&x, &p);
        for ch in 0..3 {
            let v = y.index_axis(Axis(1), ch);
            let n = v.len() as f64;
            let mean = v.sum() / n;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn relu_gradient_zero_at_zero() {
        let out = array![[[[0.0, 2.0, 0.0]]]];
        let mut g = array![[[[1.0, 1.0, 1.0]]]];
        relu_backward_inplace(&mut g, &out);
        assert_eq!(g, array![[[[0.0, 1.0, 0.0]]]]);
    }
}
