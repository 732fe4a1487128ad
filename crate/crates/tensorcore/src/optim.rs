use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(params: &ParamSet<T>, learning_rate: T, momentum: T) -> Result<Self> {
        if !(learning_rate > T::zero()) {
            return Err(TensorError::Invalid(format!(
                "learning rate must be positive, got {learning_rate:?}"
            )));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(TensorError::Invalid(format!(
                "momentum must lie in [0, 1), got {momentum:?}"
            )));
        }
        let velocity = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Ok(Self {
            learning_rate,
            momentum,
            velocity,
        })
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Applies one update in parameter insertion order. Every parameter must
    /// carry a gradient; nothing is modified if one is missing.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(TensorError::Invalid(format!(
                "optimizer tracks {} parameters, set has {}",
                self.velocity.len(),
                params.len()
            )));
        }
        if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.grad.as_ref().expect("checked above");
            if g.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd_step",
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            for ((w, vel), &gi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(g.data())
            {
                *vel = self.momentum * *vel + gi;
                *w = *w - self.learning_rate * *vel;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all parameter gradients (missing gradients count as zero).
pub fn grad_norm<T: Element>(params: &ParamSet<T>) -> T {
    let mut sq = T::zero();
    for (_, p) in params.iter() {
        if let Some(g) = &p.grad {
            for &v in g.data() {
                sq = sq + v * v;
            }
        }
    }
    sq.sqrt()
}

/// Rescales every gradient so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(params: &mut ParamSet<T>, max_norm: T) -> T {
    let norm = grad_norm(params);
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                for v in g.data_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
    norm
}
