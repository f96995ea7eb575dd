//! Adam with per-parameter step counts. Parameters whose gradient buffer is
//! absent for a step are skipped entirely — no moment decay, no bias-
//! correction advance — so a parameter outside every loss path keeps its
//! initialization bit-for-bit.

use crate::config::OptimizerConfig;
use crate::nn::ParamStore;
use crate::tensor::TensorError;

#[derive(Debug)]
pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, e)| vec![0.0; e.numel()]).collect();
        let v = store.iter().map(|(_, e)| vec![0.0; e.numel()]).collect();
        Adam { cfg: cfg.clone(), m, v, steps: vec![0; store.len()] }
    }

    /// Apply one update from per-parameter gradient buffers (indexed by
    /// parameter id, `None` = absent).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f64>>],
    ) -> Result<(), TensorError> {
        if grads.len() != store.len() {
            return Err(TensorError::Contract {
                op: "adam_step",
                msg: format!("got {} gradient slots for {} parameters", grads.len(), store.len()),
            });
        }
        let OptimizerConfig { step_size, beta1, beta2, epsilon } = self.cfg;
        for id in 0..store.len() {
            let Some(g) = &grads[id] else { continue };
            let entry = store.get(id);
            if g.len() != entry.numel() {
                return Err(TensorError::SizeMismatch {
                    op: "adam_step",
                    expected: entry.numel(),
                    got: g.len(),
                });
            }
            self.steps[id] += 1;
            let t = self.steps[id] as i32;
            let bias1 = 1.0 - beta1.powi(t);
            let bias2 = 1.0 - beta2.powi(t);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let mut data = entry.data.as_ref().clone();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                data[j] -= step_size * m_hat / (v_hat.sqrt() + epsilon);
            }
            store.set_data(id, data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::InitKind;

    fn quadratic_store(values: &[f64]) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.register("w", vec![values.len()], InitKind::Zeros);
        store.set_data(id, values.to_vec()).unwrap();
        store
    }

    #[test]
    fn single_step_matches_the_hand_derived_update() {
        // minimizing f(w) = w^2 at w = 1: gradient 2
        let mut store = quadratic_store(&[1.0]);
        let cfg = OptimizerConfig { step_size: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let mut adam = Adam::new(&cfg, &store);
        adam.step(&mut store, &[Some(vec![2.0])]).unwrap();

        // m = 0.1*2, v = 0.001*4, m_hat = 2, v_hat = 4
        let expected = 1.0 - 0.1 * 2.0 / (4.0f64.sqrt() + 1e-8);
        assert!((store.get(0).data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn second_step_matches_the_recurrence() {
        let mut store = quadratic_store(&[1.0]);
        let cfg = OptimizerConfig { step_size: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let mut adam = Adam::new(&cfg, &store);
        adam.step(&mut store, &[Some(vec![2.0])]).unwrap();
        let w1 = store.get(0).data[0];
        let g2 = 2.0 * w1;
        adam.step(&mut store, &[Some(vec![g2])]).unwrap();

        let m2 = 0.9 * (0.1 * 2.0) + 0.1 * g2;
        let v2 = 0.999 * (0.001 * 4.0) + 0.001 * g2 * g2;
        let m_hat = m2 / (1.0 - 0.9f64.powi(2));
        let v_hat = v2 / (1.0 - 0.999f64.powi(2));
        let expected = w1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((store.get(0).data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn absent_gradients_leave_parameters_untouched() {
        let mut store = ParamStore::new();
        store.register("a", vec![2], InitKind::Ones);
        store.register("b", vec![2], InitKind::Ones);
        let cfg = OptimizerConfig::default();
        let mut adam = Adam::new(&cfg, &store);

        let before = store.get(1).data.as_ref().clone();
        adam.step(&mut store, &[Some(vec![1.0, -1.0]), None]).unwrap();
        adam.step(&mut store, &[Some(vec![1.0, -1.0]), None]).unwrap();

        let after = store.get(1).data.as_ref().clone();
        for (x, y) in before.iter().zip(&after) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // the touched parameter moved
        assert!(store.get(0).data[0] != 1.0);
        // skipped parameter never advanced its bias-correction clock
        assert_eq!(adam.steps, vec![2, 0]);
    }
}
