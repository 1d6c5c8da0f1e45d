use serde::{Deserialize, Serialize};

use super::layers::ParamKind;
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `v' = m·v + g + wd·p`, `p' = p − lr·v'`.
pub fn sgd_momentum_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::ShapeMismatch(format!(
            "param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    if !grad.all_finite() {
        return Err(Error::NonFiniteGradient);
    }
    for ((p, v), g) in param.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad.data()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

pub fn cosine_lr_at(base_lr: f64, epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Config("cosine schedule needs total_epochs > 0".into()));
    }
    if epoch > total_epochs {
        return Err(Error::Config(format!("epoch {epoch} beyond schedule length {total_epochs}")));
    }
    let phase = std::f64::consts::PI * epoch as f64 / total_epochs as f64;
    Ok(0.5 * base_lr * (1.0 + phase.cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl Schedule {
    pub fn lr_at(self, base_lr: f64, epoch: usize, total_epochs: usize) -> Result<f64> {
        match self {
            Schedule::Cosine => cosine_lr_at(base_lr, epoch, total_epochs),
            Schedule::Constant => Ok(base_lr),
        }
    }
}

/// Momentum buffers for every parameter tensor of a network.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to DenseShift/quantizer latents too.
    pub decay_latents: bool,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64, decay_latents: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            momentum,
            weight_decay,
            decay_latents,
            velocity: net.params().iter().map(|(t, _)| Tensor::zeros(t.shape())).collect(),
        })
    }

    pub fn step(&mut self, net: &mut Network, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::ShapeMismatch(format!("{} gradients for {} parameters", grads.len(), self.velocity.len())));
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        for (((param, kind), grad), velocity) in net.params_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            let wd = match kind {
                ParamKind::Latent if !self.decay_latents => 0.0,
                _ => self.weight_decay,
            };
            sgd_momentum_step(param, grad, velocity, lr, self.momentum, wd)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn single_step() {
        let (mut p, mut v) = (scalar(1.0), scalar(0.0));
        sgd_momentum_step(&mut p, &scalar(1.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_param() {
        let (mut p, mut v) = (scalar(1.0), scalar(0.0));
        sgd_momentum_step(&mut p, &scalar(0.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn two_steps_accumulate_momentum() {
        let (mut p, mut v) = (scalar(0.0), scalar(0.0));
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &scalar(1.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        }
        assert!((p.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_term() {
        let (mut p, mut v) = (scalar(2.0), scalar(0.0));
        sgd_momentum_step(&mut p, &scalar(0.0), &mut v, 0.5, 0.0, 0.1).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut p, mut v) = (scalar(2.0), scalar(0.0));
        assert!(sgd_momentum_step(&mut p, &scalar(f64::NAN), &mut v, 0.5, 0.0, 0.1).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr_at(0.1, 0, 10).unwrap(), 0.1);
        assert!((cosine_lr_at(0.1, 5, 10).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr_at(0.1, 10, 10).unwrap().abs() < 1e-15);
        assert!(cosine_lr_at(0.1, 0, 0).is_err());
    }
}
