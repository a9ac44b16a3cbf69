//! Adaptive-moment optimizer over [`ParamSet`]s.

use crate::error::Result;
use crate::params::ParamSet;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Option<ParamSet>,
    v: Option<ParamSet>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: None,
            v: None,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of `params` in place. `grads` must share the
    /// schema of `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        params.ensure_same_schema(grads, "adam step")?;
        let m = self.m.get_or_insert_with(|| params.zeros_like());
        let v = self.v.get_or_insert_with(|| params.zeros_like());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((((_, p), (_, g)), (_, mt)), (_, vt)) in
            params.iter_mut().zip(grads.iter()).zip(m.iter_mut()).zip(v.iter_mut())
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mt.data_mut())
                .zip(vt.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
