use ndarray::Zip;

use crate::diffusion::Tensor;

/// First-order adaptive-moment optimizer over one tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Tensor,
    v: Tensor,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, dim: (usize, usize, usize)) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Tensor::zeros(dim),
            v: Tensor::zeros(dim),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Tensor, grad: &Tensor) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        Zip::from(params)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }
}
