use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `lr0 · (1 − t/T)^power`, zero from `t = T` on.
pub fn poly_lr(t: u64, total: u64, lr0: f64, power: f64) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    lr0 * (1.0 - t as f64 / total as f64).powf(power)
}

/// Heavy-ball velocities mirroring a parameter store, plus the global step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        OptimizerState {
            velocity: params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }

    fn check(&self, params: &ParamStore) -> Result<()> {
        let ok = self.velocity.len() == params.len()
            && self.velocity.iter().zip(params.iter()).all(|(v, (_, p))| v.shape() == p.value.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::shape("OptimizerState", "velocity buffers do not mirror the parameters"))
        }
    }
}

/// `v ← μ·v + g; p ← p − lr·v` for every parameter, using the gradients
/// accumulated in the store. Advances the step counter.
pub fn sgd_momentum_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64, momentum: f64) -> Result<()> {
    state.check(params)?;
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        for ((pv, vv), g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
            *vv = momentum * *vv + g;
            *pv -= lr * *vv;
        }
    }
    state.step += 1;
    Ok(())
}
