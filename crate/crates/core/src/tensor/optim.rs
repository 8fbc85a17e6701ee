//! Stochastic gradient descent with weight decay and optional momentum.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Plain SGD: `p <- p - lr * (grad + weight_decay * p)`, then zero the grads.
pub fn sgd_step<T: Real>(params: &mut [&mut Tensor<T>], lr: T, weight_decay: T) -> Result<()> {
    Sgd::new(T::zero()).step(params, lr, weight_decay)
}

/// SGD with heavy-ball momentum; `momentum = 0` reduces to [`sgd_step`].
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: T) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: T, weight_decay: T) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::Contract(format!(
                "sgd_step: parameter {i} (shape {:?}) has no gradient",
                params[i].shape()
            )));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        }
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad().expect("checked above").to_vec();
            for ((w, g), v) in p.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                let step = g + weight_decay * *w;
                *v = self.momentum * *v + step;
                *w = *w - lr * *v;
            }
            p.zero_grad();
        }
        Ok(())
    }
}
