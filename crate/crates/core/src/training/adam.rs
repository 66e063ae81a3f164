use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative per-step learning-rate decay, if any.
    pub decay: Option<f64>,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: None,
        }
    }
}

/// Adam moments for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self.config.decay {
            Some(d) => self.config.learning_rate * d.powf(self.step as f64),
            None => self.config.learning_rate,
        }
    }

    /// One bias-corrected update from the accumulated gradients, which are
    /// zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        let lr = self.learning_rate();
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let corr1 = T::of(1.0 - c.beta1.powf(self.step as f64));
        let corr2 = T::of(1.0 - c.beta2.powf(self.step as f64));
        let (lr, eps) = (T::of(lr), T::of(c.eps));
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let values = p.value.data_mut();
            let grads = p.grad.data_mut();
            for (((w, gr), m), v) in values
                .iter_mut()
                .zip(grads.iter_mut())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = *gr;
                *m = b1 * *m + one_b1 * gv;
                *v = b2 * *v + one_b2 * gv * gv;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
                *gr = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(0.3));
        let mut adam = Adam::new(AdamConfig::new(0.1), &store);
        adam.step(&mut store);
        assert_eq!(store.value(id).get(0, 0), 0.3);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::scalar(0.0));
        let mut adam = Adam::new(AdamConfig::new(0.01), &store);
        for _ in 0..20 {
            store.get_mut(id).grad.set(0, 0, 2.0);
            adam.step(&mut store);
            assert_eq!(store.grad(id).get(0, 0), 0.0);
        }
        assert!(store.value(id).get(0, 0) < -0.15);
    }

    #[test]
    fn decay_shrinks_step_size() {
        let store = ParamStore::<f32>::new();
        let mut adam = Adam::new(
            AdamConfig {
                decay: Some(0.5),
                ..AdamConfig::new(1.0)
            },
            &store,
        );
        adam.step = 2;
        assert_eq!(adam.learning_rate(), 0.25);
    }
}
