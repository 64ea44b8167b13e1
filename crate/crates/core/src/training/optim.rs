use crate::netcore::{Grads, ParamSet, Tensor};
use crate::scalar::Scalar;

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Updates applied so far.
    pub step: u64,
    /// First-moment estimates, one entry per parameter.
    pub m: ParamSet<T>,
    /// Second-moment estimates.
    pub v: ParamSet<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    /// One update of every trainable entry whose name starts with `prefix`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>, prefix: &str) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.epsilon);
        let ids: Vec<_> = params
            .iter()
            .filter(|(_, name, e)| e.trainable() && name.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn zeros_like<T: Scalar>(params: &ParamSet<T>) -> ParamSet<T> {
    let mut out = ParamSet::new();
    for (_, name, e) in params.iter() {
        out.insert(name, Tensor::zeros(e.tensor.shape()), e.role).expect("names are unique");
    }
    out
}
