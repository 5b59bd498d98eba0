use super::{Float, ParamStore};

/// Adam with bias correction. The step counter lives in the store so that
/// every parameter shares it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam { lr, ..Adam::default() }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step<T: Float>(&self, store: &mut ParamStore<T>) {
        store.step += 1;
        let t = store.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() / (T::one() - T::of(self.beta1.powi(t)));
        let c2 = T::one() / (T::one() - T::of(self.beta2.powi(t)));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for p in store.params_mut() {
            for i in 0..p.grad.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (T::one() - b1) * g;
                p.v[i] = b2 * p.v[i] + (T::one() - b2) * g * g;
                let m_hat = p.m[i] * c1;
                let v_hat = p.v[i] * c2;
                p.value.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                p.grad[i] = T::zero();
            }
        }
    }
}
