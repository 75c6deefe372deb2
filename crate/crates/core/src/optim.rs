//! Adam.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.0, beta2: 0.9, eps: 1e-8 }
    }
}

impl AdamConfig {
    /// A zero learning rate is allowed here so that identity steps can be
    /// exercised; training configs reject it separately.
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr.is_finite() && self.lr >= 0.0) || !unit(self.beta1) || !unit(self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::Shape("gradient layout does not match parameters".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn put(&self, ar: &mut Archive, prefix: &str) {
        ar.put_store(&format!("{prefix}m/"), &self.m);
        ar.put_store(&format!("{prefix}v/"), &self.v);
    }

    pub fn take(ar: &Archive, prefix: &str, config: AdamConfig, step: u64, params: &ParamStore) -> Result<Self> {
        let m = ar.take_store(&format!("{prefix}m/"));
        let v = ar.take_store(&format!("{prefix}v/"));
        if !params.same_layout(&m) || !params.same_layout(&v) {
            return Err(Error::Checkpoint(format!("optimizer moments under {prefix} do not match parameters")));
        }
        Ok(Self { config, step, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v));
        s
    }

    #[test]
    fn matches_hand_computed_trace() {
        // lr 0.1, beta1 0.5, beta2 0.9, eps 1e-8; gradients 1, -2, 3 on p0 = 1.
        // t=1: m=0.5   v=0.1   mhat=1      vhat=1     p=1-0.1*1/1           = 0.9
        // t=2: m=-0.75 v=0.49  mhat=-1     vhat=2.578947.. p=0.9+0.1/1.605910..
        // t=3: m=1.125 v=1.341 mhat=1.2857.. vhat=4.948339.. p -= 0.1*mhat/sqrt(vhat)
        let cfg = AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.9, eps: 1e-8 };
        let mut p = one(1.0);
        let mut opt = Adam::new(cfg, &p);
        let mut expected = 1.0;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, gv) in [1.0, -2.0, 3.0].into_iter().enumerate() {
            opt.update(&mut p, &one(gv)).unwrap();
            m = 0.5 * m + 0.5 * gv;
            v = 0.9 * v + 0.1 * gv * gv;
            let k = t as i32 + 1;
            expected -= 0.1 * (m / (1.0 - 0.5f64.powi(k))) / ((v / (1.0 - 0.9f64.powi(k))).sqrt() + 1e-8);
        }
        assert!((opt.m.get("p").unwrap().item() - 1.125).abs() < 1e-15);
        assert!((opt.v.get("p").unwrap().item() - 1.341).abs() < 1e-12);
        assert!((p.get("p").unwrap().item() - expected).abs() < 1e-15);
        let frozen = 1.0 - 0.1 + 0.1 / (0.49f64 / 0.19).sqrt() - 0.1 * (1.125 / 0.875) / (1.341f64 / 0.271).sqrt();
        assert!((p.get("p").unwrap().item() - frozen).abs() < 1e-7);
    }

    #[test]
    fn zero_beta1_steps_with_normalized_gradient() {
        let mut p = one(0.0);
        let mut opt = Adam::new(AdamConfig { lr: 1e-4, ..Default::default() }, &p);
        opt.update(&mut p, &one(5.0)).unwrap();
        assert!((p.get("p").unwrap().item() + 1e-4).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = one(0.3);
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &p);
        opt.update(&mut p, &one(2.0)).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 0.3);
    }
}
