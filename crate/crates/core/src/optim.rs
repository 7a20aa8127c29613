//! Adam optimiser.

use crate::config::AdamConfig;
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let [lr, b1t, b2t, eps] = [c.lr, b1, b2, c.eps].map(T::from_f64_lossy);
        let (one, bc1, bc2) = (T::one(), T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id).data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                m[k] = b1t * m[k] + (one - b1t) * g[k];
                v[k] = b2t * v[k] + (one - b2t) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
