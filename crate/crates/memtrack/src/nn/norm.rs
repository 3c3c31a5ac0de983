//! Batch normalization over `[N, C, H, W]`: batch statistics in train mode,
//! running statistics at inference.

use ndarray::{Array1, Array4, ArrayD, Axis};

use super::Param;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
    channels: usize,
}

#[derive(Debug)]
pub struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::from_elem(vec![channels], 1.0)),
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
            channels,
        }
    }

    /// Train-mode forward: normalize with batch statistics and update the
    /// running estimates (unbiased variance, torch convention).
    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let m = (n * h * w) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let mut plane = xhat.index_axis_mut(Axis(1), ci);
            let mean = plane.sum() / m;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let istd = 1.0 / (var + self.eps).sqrt();
            plane.mapv_inplace(|v| (v - mean) * istd);
            inv_std[ci] = istd;
            self.running_mean[ci] = (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci] + self.momentum * unbiased;
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let g = self.gamma.value[[ci]];
            let b = self.beta.value[[ci]];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| g * v + b);
        }
        (y, BnCache { xhat, inv_std })
    }

    /// Inference-mode forward using running statistics.
    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (_, c, _, _) = x.dim();
        assert_eq!(c, self.channels);
        let mut y = x.clone();
        for ci in 0..c {
            let istd = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let mean = self.running_mean[ci];
            let g = self.gamma.value[[ci]];
            let b = self.beta.value[[ci]];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| g * (v - mean) * istd + b);
        }
        y
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>, cache: &BnCache) -> Array4<f64> {
        let (n, c, h, w) = grad_out.dim();
        let m = (n * h * w) as f64;
        let mut gx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let g_plane = grad_out.index_axis(Axis(1), ci);
            let xhat = cache.xhat.index_axis(Axis(1), ci);
            let sum_g: f64 = g_plane.sum();
            let sum_gx: f64 = g_plane.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
            self.gamma.grad[[ci]] += sum_gx;
            self.beta.grad[[ci]] += sum_g;
            let scale = self.gamma.value[[ci]] * cache.inv_std[ci];
            let mean_g = sum_g / m;
            let mean_gx = sum_gx / m;
            let mut out = gx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut out).and(&g_plane).and(&xhat).for_each(|o, &g, &xh| {
                *o = scale * (g - mean_g - xh * mean_gx);
            });
        }
        gx
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param); 2] {
        [("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }

    pub fn buffers_mut(&mut self) -> [(&'static str, &mut Array1<f64>); 2] {
        [("running_mean", &mut self.running_mean), ("running_var", &mut self.running_var)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_normalizes_batch() {
        let mut bn = BatchNorm2d::new(2);
        let x = Array4::from_shape_fn((2, 2, 3, 3), |(n, c, y, xx)| {
            (n * 9 + y * 3 + xx) as f64 * (c as f64 + 1.0)
        });
        let (y, _) = bn.forward_train(&x);
        for c in 0..2 {
            let plane = y.index_axis(Axis(1), c);
            let m = plane.sum() / 18.0;
            let v = plane.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / 18.0;
            approx::assert_abs_diff_eq!(m, 0.0, epsilon = 1e-10);
            approx::assert_abs_diff_eq!(v, 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::new(1);
        bn.gamma.value[[0]] = 1.3;
        bn.beta.value[[0]] = -0.2;
        let x = Array4::from_shape_fn((1, 1, 2, 3), |(_, _, y, xx)| 0.5 * y as f64 - 0.3 * xx as f64);
        let proj = Array4::from_shape_fn((1, 1, 2, 3), |(_, _, y, xx)| ((y + 2 * xx) as f64).cos());
        let loss = |bn: &BatchNorm2d, x: &Array4<f64>| {
            let mut b = bn.clone();
            let (y, _) = b.forward_train(x);
            (&y * &proj).sum()
        };
        let (_, cache) = bn.clone().forward_train(&x);
        let mut bn2 = bn.clone();
        let gx = bn2.backward(&proj, &cache);
        let h = 1e-6;
        for &idx in &[[0usize, 0, 0, 0], [0, 0, 1, 2], [0, 0, 0, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h);
            approx::assert_abs_diff_eq!(gx[idx], fd, epsilon = 1e-6);
        }
    }
}
