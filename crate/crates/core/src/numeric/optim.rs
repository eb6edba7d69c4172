use serde::{Deserialize, Serialize};

use super::tape::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let first: Vec<Vec<f32>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates every parameter in `store`. Each one must have a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        if let Some(missing) = (0..store.len()).find(|&id| !grads.contains(id)) {
            return Err(Error::contract(format!("missing gradient for `{}`", store.name(missing))));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in 0..store.len() {
            self.update(store, grads, id, lr, weight_decay, beta1, beta2, eps, bc1, bc2)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &Grads,
        id: ParamId,
        lr: f32,
        wd: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
        bc1: f32,
        bc2: f32,
    ) -> Result<()> {
        let g = grads.get(id).expect("checked above");
        let p = store.get_mut(id);
        if g.len() != p.len() {
            return Err(Error::dim("AdamW::step", p.len(), g.len()));
        }
        let (m, v) = (&mut self.first[id], &mut self.second[id]);
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *p -= lr * wd * *p;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn one_param(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v));
        s
    }

    fn grad(v: f32) -> Grads {
        let store = one_param(0.0);
        let mut tape = crate::numeric::Tape::new();
        let p = tape.param(&store, 0);
        let l = tape.scale(p, v);
        let l = tape.sum_all(l);
        tape.backward(l).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut store = one_param(0.7);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(&mut store, &grad(0.0)).unwrap();
        assert_eq!(store.get(0).item(), 0.7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_grad_scales_by_decay() {
        let mut store = one_param(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg);
        opt.step(&mut store, &grad(0.0)).unwrap();
        assert_eq!(store.get(0).item(), 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn constant_grad_trajectory_matches_scalar_oracle() {
        // Oracle: the update rule evaluated in f64 by hand-rolled loop.
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let mut p = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            expected.push(p);
        }
        let mut store = one_param(1.0);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for e in expected {
            opt.step(&mut store, &grad(1.0)).unwrap();
            assert!((store.get(0).item() as f64 - e).abs() < 1e-6, "{} vs {e}", store.get(0).item());
        }
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut store = one_param(1.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        assert!(matches!(opt.step(&mut store, &Grads::new()), Err(Error::Contract(_))));
        assert_eq!(opt.step_count(), 0);
    }
}
