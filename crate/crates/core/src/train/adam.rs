use ndarray::{ArrayD, Zip};

use crate::tensor::{Gradients, ParamStore, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` leaves gradients untouched.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<ArrayD<T>> = store.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> f64 {
        let ids: Vec<_> = store.ids().collect();
        let norm = ids
            .iter()
            .map(|&id| grads.param(id).iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let step = c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        let (scale, step) = (T::of(scale), T::of(step));
        let one = T::one();
        for id in ids {
            let i = id.index();
            Zip::from(store.value_mut(id))
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(grads.param(id))
                .for_each(|w, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *w = *w - step * *m / (v.sqrt() + eps);
                });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ndarray::arr1(&[1.0, -2.0, 3.0]).into_dyn());
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads = {
            let mut g = Graph::with_params(&store);
            let w = g.param(id);
            let s = g.square(w);
            let l = g.sum(s);
            g.backward(l).unwrap()
        };
        adam.step(&mut store, &grads);
        let want = [1.0 - 1e-3, -2.0 + 1e-3, 3.0 - 1e-3];
        for (a, b) in store.value(id).iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ArrayD::from_elem(IxDyn(&[4]), 5.0));
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                clip_norm: Some(1.0),
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::with_params(&store);
                let w = g.param(id);
                let s = g.square(w);
                let l = g.sum(s);
                g.backward(l).unwrap()
            };
            adam.step(&mut store, &grads);
        }
        assert!(store.value(id).iter().all(|w| w.abs() < 1e-2), "{}", store.value(id));
        assert_eq!(adam.steps(), 500);
    }
}
