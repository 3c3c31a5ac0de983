//! Minimal f64 building blocks for the feature encoder: strided convolution,
//! batch normalization, ReLU and Adam. Forward passes cache what their
//! backward passes need; gradients accumulate into each parameter's `grad`
//! buffer until the optimizer consumes them.

mod conv;
mod norm;

pub use conv::{Conv2d, ConvCache};
pub use norm::{BatchNorm2d, BnCache};

use ndarray::{Array4, ArrayD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A trainable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Kaiming-normal initialization for a conv weight of shape
/// `[c_out, c_in, kh, kw]` (fan-in scaled for ReLU nets).
pub fn kaiming_conv(shape: [usize; 4], rng: &mut impl Rng) -> ArrayD<f64> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let std = (2.0 / fan_in).sqrt();
    let normal = Normal::new(0.0, std).expect("valid normal");
    ArrayD::from_shape_fn(shape.to_vec(), |_| normal.sample(rng))
}

/// ReLU forward; the output doubles as the backward cache.
pub fn relu_forward(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// ReLU backward given the forward output.
pub fn relu_backward(y: &Array4<f64>, grad_out: &Array4<f64>) -> Array4<f64> {
    let mut gx = grad_out.clone();
    gx.zip_mut_with(y, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

/// Adam with bias correction. Slots are allocated lazily on the first step
/// and keyed by parameter position, so the caller must present parameters in
/// a stable order.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    slots: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, slots: Vec::new() }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, params: &mut [(&str, &mut Param)]) {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|(_, p)| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())))
                .collect();
        }
        assert_eq!(self.slots.len(), params.len(), "parameter set changed between steps");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((_, param), (m, v)) in params.iter_mut().zip(self.slots.iter_mut()) {
            ndarray::Zip::from(&mut param.value)
                .and(&param.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
            param.zero_grad();
        }
    }
}
