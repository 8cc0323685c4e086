use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::params::{ParamId, ParamStore};

use super::config::OptimConfig;

/// One AdamW update in place. `t` is the 1-based step count used for bias
/// correction. Weight decay is decoupled: it shrinks `param` directly and
/// never enters the moment estimates.
pub fn adamw_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, hp: &OptimConfig) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= hp.lr * hp.weight_decay * param[i];
        param[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW over the trainable entries of a [`ParamStore`]. Moment buffers
/// exist only for parameters that were trainable when the optimizer was
/// built; frozen parameters are never touched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hp: OptimConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(store: &ParamStore, hp: OptimConfig) -> Result<Self> {
        hp.validate()?;
        let moments = store
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| {
                let z = Tensor::zeros(e.tensor.shape());
                (e.name.clone(), Moments { m: z.clone(), v: z })
            })
            .collect();
        Ok(AdamW { hp, step: 0, moments })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// Rebuilds optimizer state from saved moments and a step count.
    pub fn restore(hp: OptimConfig, step: u64, moments: BTreeMap<String, Moments>) -> Result<Self> {
        hp.validate()?;
        Ok(AdamW { hp, step, moments })
    }

    /// Applies one update given gradients for trainable parameters.
    /// Parameters absent from `grads` are left untouched, decay included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.step += 1;
        for (id, g) in grads {
            let name = store.entry(*id).name.clone();
            let mom = self.moments.get_mut(&name).ok_or_else(|| {
                Error::Contract(format!("optimizer received a gradient for untracked parameter {name}"))
            })?;
            let p = store.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
            adamw_step(p.data_mut(), g.data(), mom.m.data_mut(), mom.v.data_mut(), self.step, &self.hp);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let hp = OptimConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adamw_step(&mut p, &[1.0], &mut m, &mut v, 1, &hp);
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        let hp = OptimConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let (mut p, mut m, mut v) = ([2.0], [0.0], [0.0]);
        adamw_step(&mut p, &[0.0], &mut m, &mut v, 1, &hp);
        assert_eq!(p[0], 2.0 - 0.1 * 0.5 * 2.0);
        assert_eq!((m[0], v[0]), (0.0, 0.0));
    }

    #[test]
    fn frozen_parameters_get_no_state() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::ones(&[2]), ParamGroup::Heads);
        let b = store.add("b", Tensor::ones(&[2]), ParamGroup::Backbone);
        store.set_trainable(b, false);
        let mut opt = AdamW::new(&store, OptimConfig::default()).unwrap();
        assert!(opt.has_moments("a") && !opt.has_moments("b"));
        opt.step(&mut store, &[(a, Tensor::ones(&[2]))]).unwrap();
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
        assert!(opt.step(&mut store, &[(b, Tensor::ones(&[2]))]).is_err());
    }
}
