use std::collections::BTreeMap;

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One update of every parameter in `params`; gradients are zeroed afterwards.
pub fn adam_step(params: &mut ParameterStore, state: &mut AdamState) -> Result<()> {
    if let Some(path) = params.paths().find(|p| params.grad(p).is_none()) {
        return Err(Error::Contract(format!("no gradient for parameter {path}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (path, value, grad) in params.entries_mut() {
        let g = grad.as_mut().expect("checked above");
        let [r, c] = value.shape();
        let m = state.first.entry(path.clone()).or_insert_with(|| Tensor::zeros(r, c));
        let v = state.second.entry(path.clone()).or_insert_with(|| Tensor::zeros(r, c));
        for i in 0..value.len() {
            let gi = g.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + state.eps);
            let w = &mut value.data_mut()[i];
            *w -= state.lr * (update + state.weight_decay * *w);
        }
        g.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, g: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(g));
        s.accumulate_grads(&grads).unwrap();
        s
    }

    #[test]
    fn one_step_by_hand() {
        let mut s = single(1.0, 1.0);
        let mut st = AdamState::new(0.1, 0.0);
        adam_step(&mut s, &mut st).unwrap();
        // m̂ = 1, v̂ = 1, so w = 1 − 0.1·1/(1 + 1e-8).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap().item() - expected).abs() < 1e-15);
        assert_eq!(st.step(), 1);
        assert_eq!(s.grad("w").unwrap().item(), 0.0);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = single(0.7, 0.0);
        let mut st = AdamState::new(0.1, 0.0);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn missing_gradient_names_the_path() {
        let mut s = ParameterStore::new();
        s.insert("enc.wq", Tensor::scalar(1.0)).unwrap();
        let err = adam_step(&mut s, &mut AdamState::new(0.1, 0.0)).unwrap_err();
        assert!(matches!(&err, Error::Contract(m) if m.contains("enc.wq")));
    }

    #[test]
    fn identical_stores_stay_identical() {
        let run = || {
            let mut s = single(0.3, -0.2);
            let mut st = AdamState::new(0.01, 1e-6);
            for k in 0..5 {
                let mut g = BTreeMap::new();
                g.insert("w".to_string(), Tensor::scalar(0.1 * k as f64 - 0.2));
                s.accumulate_grads(&g).unwrap();
                adam_step(&mut s, &mut st).unwrap();
            }
            s.get("w").unwrap().item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
