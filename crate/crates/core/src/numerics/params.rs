use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::tensor::Tensor;
use crate::{Error, Result};

/// A learnable tensor with its gradient slot and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub m: Tensor,
    pub v: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Self {
            value,
            grad: None,
            m,
            v,
        }
    }
}

/// Named learnable tensors plus optimizer state. Iteration order is the
/// lexicographic order of names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Adds `grad` into the gradient slot of `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if grad.shape() != p.value.shape() {
            return Err(Error::shape("accumulate_grad", grad.shape(), p.value.shape()));
        }
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            slot => *slot = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params.values_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter; clears gradients.
///
/// Fails without touching any parameter if some gradient is missing.
pub fn adam_step(store: &mut ParamStore, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if let Some((name, _)) = store.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::MissingGradient(name.to_string()));
    }
    let t = store.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (_, p) in store.params_mut() {
        let g = p.grad.take().expect("checked above");
        let (m, v) = (p.m.data_mut(), p.v.data_mut());
        for (i, (x, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    store.step = t;
    Ok(())
}

/// Cosine annealing: `lr0 · ½(1 + cos(π t / T))`, held at 0 past `T`.
pub fn cosine_lr(lr0: f64, t: u64, horizon: u64) -> f64 {
    if horizon == 0 {
        return lr0;
    }
    let frac = (t.min(horizon)) as f64 / horizon as f64;
    lr0 * 0.5 * (1.0 + (PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: Vec<f64>, grad: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = value.len();
        s.insert("p", Tensor::new(&[n], value).unwrap());
        s.accumulate_grad("p", &Tensor::new(&[n], grad).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut s = store_with(vec![1.0, -2.0, 0.5], vec![3.0, -0.01, 1e3]);
        adam_step(&mut s, 0.1, &AdamConfig::default()).unwrap();
        let v = s.value("p").unwrap().data().to_vec();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-5);
        assert!((v[2] - 0.4).abs() < 1e-6);
        assert_eq!(s.step(), 1);
        assert!(s.get("p").unwrap().grad.is_none());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store_with(vec![1.0, 2.0], vec![0.0, 0.0]);
        adam_step(&mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(s.value("p").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]));
        assert!(matches!(
            adam_step(&mut s, 0.1, &AdamConfig::default()),
            Err(Error::MissingGradient(n)) if n == "a"
        ));
    }

    #[test]
    fn two_steps_on_quadratic_match_hand_recurrence() {
        // f(x) = x², g = 2x, x0 = 1.5
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(&[1], vec![1.5]).unwrap());
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 2.0 * s.value("x").unwrap().item();
            s.accumulate_grad("x", &Tensor::new(&[1], vec![g]).unwrap()).unwrap();
            adam_step(&mut s, lr, &AdamConfig::default()).unwrap();

            let gh = 2.0 * x;
            m = b1 * m + (1.0 - b1) * gh;
            v = b2 * v + (1.0 - b2) * gh * gh;
            let mh = m / (1.0 - b1f(b1, t));
            let vh = v / (1.0 - b1f(b2, t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((s.value("x").unwrap().item() - x).abs() < 1e-15);
        // after two unit-sign steps x ≈ 1.5 - 2·0.05
        assert!((x - 1.4).abs() < 1e-3);

        fn b1f(b: f64, t: i32) -> f64 {
            b.powi(t)
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 500, 100).abs() < 1e-18);
    }
}
