use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Mini-batch SGD with classical momentum:
///
/// ```text
/// v <- mu * v - lr * g
/// w <- w + v
/// ```
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {lr} is invalid")));
        }
        Ok(SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update. Every parameter must carry a gradient; nothing is
    /// modified otherwise. The parameter list must keep the same order and
    /// shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(index) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::MissingGrad { index });
        }
        let fresh = self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.len());
        if fresh {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad().expect("checked above").to_vec();
            for ((w, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = self.momentum * *vel - self.lr * g;
                *w += *vel;
            }
        }
        Ok(())
    }
}
