//! Adam with global-norm clipping and a linear warmup/decay schedule.

use fpdsc_tensor::ParamStore;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LinearSchedule {
    pub fn new(peak_lr: f64, warmup_proportion: f64, total_steps: u64) -> Self {
        let total_steps = total_steps.max(1);
        let warmup_steps = ((total_steps as f64 * warmup_proportion).round() as u64).min(total_steps);
        Self {
            peak_lr,
            warmup_steps,
            total_steps,
        }
    }

    /// Rises linearly from 0 to the peak over the warmup, then decays linearly to 0.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.peak_lr * (step as f64 / self.warmup_steps as f64)
        } else if step >= self.total_steps {
            0.0
        } else {
            let span = (self.total_steps - self.warmup_steps) as f64;
            self.peak_lr * ((self.total_steps - step) as f64 / span)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, indexed like the parameter store.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_betas(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| {
                if p.frozen {
                    Vec::new()
                } else {
                    vec![0.0; p.tensor.len()]
                }
            })
            .collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Global L2 norm of the accumulated gradients of trainable parameters.
    pub fn grad_norm(store: &ParamStore, scale: f64) -> f64 {
        store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .filter_map(|(_, p)| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|g| (g * scale) * (g * scale))
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update from the accumulated gradients times `scale`, clipped to `max_norm`,
    /// then clears them. Returns the pre-clipping gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64, scale: f64, max_norm: Option<f64>) -> f64 {
        let norm = Self::grad_norm(store, scale);
        let clip = match max_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let param = store.get_mut(id);
            if param.frozen {
                continue;
            }
            let Some(grad) = param.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, w) in param.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i] * scale * clip;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fpdsc_tensor::{Graph, Tensor};

    #[test]
    fn schedule_endpoints() {
        let s = LinearSchedule::new(1e-4, 0.1, 1000);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(100), 1e-4);
        assert!((s.lr(550) - 0.5e-4).abs() < 1e-18);
        assert_eq!(s.lr(1000), 0.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![3.0]).unwrap(), false);
        let frozen = store.add("c", Tensor::vector(vec![1.5]).unwrap(), true);
        let mut adam = Adam::new(&store);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let c = g.param(&store, frozen);
            let diff = g.sub(x, c).unwrap();
            let sq = g.mul(diff, diff).unwrap();
            let loss = g.sum(sq).unwrap();
            let grads = g.backward(loss).unwrap();
            store.accumulate(&grads).unwrap();
            adam.update(&mut store, 0.05, 1.0, Some(1.0));
        }
        assert!((store.get(id).tensor.data()[0] - 1.5).abs() < 1e-3);
        assert_eq!(store.get(frozen).tensor.data()[0], 1.5);
    }

    #[test]
    fn clipping_bounds_the_step_direction() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![0.0, 0.0]).unwrap(), false);
        store.get_mut(id).tensor.accumulate_grad(&[30.0, 40.0]).unwrap();
        assert_eq!(Adam::grad_norm(&store, 1.0), 50.0);
        let mut adam = Adam::new(&store);
        let norm = adam.update(&mut store, 0.1, 1.0, Some(1.0));
        assert_eq!(norm, 50.0);
        assert!((adam.m[0][0] - 0.1 * 0.6).abs() < 1e-12);
    }
}
