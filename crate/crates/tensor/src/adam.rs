use crate::params::{Gradients, ParamStore};
use crate::{Matrix, Scalar};

/// Adam with bias correction. Moments are kept per parameter, in store order.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub step: u64,
    pub m: Vec<Matrix<F>>,
    pub v: Vec<Matrix<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Matrix<F>> = store.iter().map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { beta1: F::c(beta1), beta2: F::c(beta2), eps: F::c(eps), step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient keep their value and moments.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>, lr: F) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id);
            for k in 0..g.len() {
                let gk = g.as_slice()[k];
                let mk = self.beta1 * m.as_slice()[k] + (F::one() - self.beta1) * gk;
                let vk = self.beta2 * v.as_slice()[k] + (F::one() - self.beta2) * gk * gk;
                m.as_mut_slice()[k] = mk;
                v.as_mut_slice()[k] = vk;
                let mhat = mk / bc1;
                let vhat = vk / bc2;
                p.as_mut_slice()[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
