use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};

/// Adam with bias correction. The step counter is shared by every
/// parameter the optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    /// Updates the listed parameters from their accumulated gradients and
    /// clears those gradients. Every listed parameter must carry a gradient.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(TensorError::Contract(format!(
                "adam step: parameter {:?} has no gradient",
                store.get(id).name
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        for &id in ids {
            let p = store.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            let values = p.value.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                let m = b1 * p.adam_m[i] + (T::one() - b1) * g;
                let v = b2 * p.adam_v[i] + (T::one() - b2) * g * g;
                p.adam_m[i] = m;
                p.adam_v[i] = v;
                let m_hat = m.as_f64() / c1;
                let v_hat = v.as_f64() / c2;
                values[i] -= T::lit(self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}
