use crate::encoder::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cosine decay from `base` at `step = 0` to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// One velocity per parameter, in [`Network::tensors`] order.
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(net: &Network, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: net
                .tensors()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &[Tensor]) -> Result<()> {
        let params = net.tensors_mut();
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {} gradients for {}",
                self.velocity.len(),
                grads.len(),
                params.len()
            )));
        }
        for (((_, p), g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
        assert_eq!(cosine_lr(0.1, 3, 0), 0.1);
    }
}
