//! Affine layer and the ReLU nonlinearity.

use rand::Rng;

use super::init::glorot_uniform;
use super::tensor::Tensor2;

/// y = W x + b, with W stored out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor2,
    pub b: Vec<f64>,
}

/// Gradient buffer matching a `Dense`. Backward accumulates, so one buffer
/// serves a whole batch.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub w: Tensor2,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Dense {
            w: Tensor2::zeros(out, inp),
            b: vec![0.0; out],
        }
    }

    pub fn init<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        Dense {
            w: glorot_uniform(out, inp, rng),
            b: vec![0.0; out],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.w.matvec(x);
        for (yi, bi) in y.iter_mut().zip(&self.b) {
            *yi += bi;
        }
        y
    }

    /// Accumulates dW = dy xᵀ and db = dy into `grads`; returns dx = Wᵀ dy.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut DenseGrads) -> Vec<f64> {
        grads.w.add_outer(dy, x);
        for (gb, d) in grads.b.iter_mut().zip(dy) {
            *gb += d;
        }
        self.w.matvec_t(dy)
    }

    pub fn grads_like(&self) -> DenseGrads {
        DenseGrads {
            w: Tensor2::zeros(self.w.rows(), self.w.cols()),
            b: vec![0.0; self.b.len()],
        }
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Subgradient at exactly zero is taken as zero (strict `x > 0` mask).
pub fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), dy.len());
    x.iter()
        .zip(dy)
        .map(|(xi, d)| if *xi > 0.0 { *d } else { 0.0 })
        .collect()
}
