//! 2D convolution via im2col + GEMM, with symmetric zero padding.

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::Rng;

use super::{kaiming_conv, Param};

/// Convolution layer over `[N, C, H, W]` tensors.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
}

/// Cached im2col matrix for the backward pass.
#[derive(Debug)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let weight = Param::new(kaiming_conv([c_out, c_in, kernel, kernel], rng));
        let bias = Param::zeros(&[c_out]);
        Conv2d { weight, bias, stride, pad: kernel / 2, c_in, c_out, kernel }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn weight2(&self) -> Array2<f64> {
        let k = self.c_in * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.c_out, k))
            .expect("contiguous weight")
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "input channels");
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.pad, oh, ow);
        let out2 = self.weight2().dot(&cols); // [c_out, n*oh*ow]
        let mut out = out2
            .into_shape_with_order((self.c_out, n, oh, ow))
            .expect("reshape")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        let bias = &self.bias.value;
        for co in 0..self.c_out {
            let b = bias[[co]];
            out.index_axis_mut(Axis(1), co).mapv_inplace(|v| v + b);
        }
        (out, ConvCache { cols, in_shape: [n, c, h, w], out_hw: (oh, ow) })
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Array4<f64>, cache: &ConvCache) -> Array4<f64> {
        let [n, ..] = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let k = self.c_in * self.kernel * self.kernel;
        let g2 = grad_out
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_shape_with_order((self.c_out, n * oh * ow))
            .expect("reshape")
            .to_owned();

        let dw = g2.dot(&cache.cols.t()); // [c_out, k]
        self.weight.grad.zip_mut_with(
            &dw.into_shape_with_order((self.c_out, self.c_in, self.kernel, self.kernel))
                .expect("reshape")
                .into_dyn(),
            |a, &b| *a += b,
        );
        let db = g2.sum_axis(Axis(1));
        self.bias.grad.zip_mut_with(&db.into_dyn(), |a, &b| *a += b);

        let dcols = self.weight2().t().dot(&g2); // [k, n*oh*ow]
        debug_assert_eq!(dcols.dim(), (k, n * oh * ow));
        col2im(&dcols, cache.in_shape, self.kernel, self.stride, self.pad, oh, ow)
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    pub fn params(&self) -> [(&'static str, &ArrayD<f64>); 2] {
        [("weight", &self.weight.value), ("bias", &self.bias.value)]
    }
}

fn im2col(x: &Array4<f64>, kernel: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (n, c_in, h, w) = x.dim();
    let k = c_in * kernel * kernel;
    let mut cols = Array2::<f64>::zeros((k, n * oh * ow));
    let x_slice = x.as_slice().expect("standard layout");
    let cols_slice = cols.as_slice_mut().expect("standard layout");
    let n_cols = n * oh * ow;
    for ni in 0..n {
        for c in 0..c_in {
            let plane = &x_slice[(ni * c_in + c) * h * w..(ni * c_in + c + 1) * h * w];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let row = (c * kernel + ky) * kernel + kx;
                    let row_out = &mut cols_slice[row * n_cols..(row + 1) * n_cols];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_base = ni * oh * ow + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row_out[dst_base + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    in_shape: [usize; 4],
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let [n, c_in, h, w] = in_shape;
    let mut dx = Array4::<f64>::zeros((n, c_in, h, w));
    let dcols_slice = dcols.as_slice().expect("standard layout");
    let dx_slice = dx.as_slice_mut().expect("standard layout");
    let n_cols = n * oh * ow;
    for ni in 0..n {
        for c in 0..c_in {
            let plane = &mut dx_slice[(ni * c_in + c) * h * w..(ni * c_in + c + 1) * h * w];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let row = (c * kernel + ky) * kernel + kx;
                    let row_in = &dcols_slice[row * n_cols..(row + 1) * n_cols];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src_base = ni * oh * ow + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst_row[ix as usize] += row_in[src_base + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stride_two_output_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(3, 4, 3, 2, &mut rng);
        assert_eq!(conv.out_hw(64, 64), (32, 32));
        let conv7 = Conv2d::new(3, 4, 7, 2, &mut rng);
        assert_eq!(conv7.out_hw(64, 64), (32, 32));
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(2, 3, 3, 2, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 6, 6), |(_, c, y, xx)| {
            (c as f64 + 1.0) * (y as f64 * 0.3 - xx as f64 * 0.2).sin()
        });
        let (y, _) = conv.forward(&x);
        // Direct evaluation at one output site.
        let (co, oy, ox) = (1usize, 1usize, 2usize);
        let mut acc = conv.bias.value[[co]];
        for ci in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    let ix = (ox * 2 + kx) as isize - 1;
                    if iy < 0 || ix < 0 || iy >= 6 || ix >= 6 {
                        continue;
                    }
                    acc += conv.weight.value[[co, ci, ky, kx]] * x[[0, ci, iy as usize, ix as usize]];
                }
            }
        }
        approx::assert_abs_diff_eq!(y[[0, co, oy, ox]], acc, epsilon = 1e-12);
    }

    #[test]
    fn stride_two_center_maps_to_doubled_index() {
        // Output index k of a stride-2, pad k/2 conv is centered on input 2k.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new(1, 1, 3, 2, &mut rng);
        conv.weight.value.fill(0.0);
        conv.weight.value[[0, 0, 1, 1]] = 1.0; // identity kernel center
        conv.bias.value.fill(0.0);
        let x = Array4::from_shape_fn((1, 1, 8, 8), |(_, _, y, xx)| (y * 8 + xx) as f64);
        let (y, _) = conv.forward(&x);
        for oy in 0..4 {
            for ox in 0..4 {
                assert_eq!(y[[0, 0, oy, ox]], x[[0, 0, 2 * oy, 2 * ox]]);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(2, 2, 3, 2, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, c, y, xx)| {
            0.1 * (c as f64 - y as f64 + 2.0 * xx as f64)
        });
        let proj = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, y, xx)| {
            ((c + 2 * y + xx) as f64 * 0.7).cos()
        });
        let loss = |conv: &Conv2d, x: &Array4<f64>| -> f64 {
            let (y, _) = conv.forward(x);
            (&y * &proj).sum()
        };
        let (_, cache) = conv.forward(&x);
        let gx = conv.backward(&proj, &cache);

        let h = 1e-6;
        // weight gradient
        for &idx in &[[0usize, 0, 0, 0], [1, 1, 2, 1], [0, 1, 1, 2]] {
            let orig = conv.weight.value[idx.as_slice()];
            conv.weight.value[idx.as_slice()] = orig + h;
            let lp = loss(&conv, &x);
            conv.weight.value[idx.as_slice()] = orig - h;
            let lm = loss(&conv, &x);
            conv.weight.value[idx.as_slice()] = orig;
            let fd = (lp - lm) / (2.0 * h);
            approx::assert_relative_eq!(conv.weight.grad[idx.as_slice()], fd, max_relative = 1e-5);
        }
        // input gradient
        let mut x2 = x.clone();
        for &idx in &[[0usize, 0, 0, 0], [0, 1, 3, 2], [0, 0, 2, 3]] {
            let orig = x2[idx];
            x2[idx] = orig + h;
            let lp = loss(&conv, &x2);
            x2[idx] = orig - h;
            let lm = loss(&conv, &x2);
            x2[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            approx::assert_relative_eq!(gx[idx], fd, max_relative = 1e-5);
        }
    }
}
