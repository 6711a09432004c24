use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};

/// A deterministic scalar function of a [`ParamStore`].
pub trait Objective {
    fn value(&self, store: &ParamStore) -> Result<f64>;

    /// The value and reverse-mode gradients keyed by parameter name.
    /// Parameters absent from the map have zero gradient.
    fn value_and_grad(&self, store: &ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    pub max_error: f64,
    pub worst: Option<String>,
}

impl GradCheckReport {
    /// Max error over every parameter whose name starts with `prefix`.
    pub fn group_max(&self, prefix: &str) -> Option<f64> {
        self.per_param
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, e)| *e)
            .reduce(f64::max)
    }
}

pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Compares reverse-mode gradients against central differences.
///
/// The per-coordinate error is `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`;
/// the report carries its maximum per parameter and overall.
pub fn grad_check(store: &ParamStore, objective: &impl Objective, eps: f64) -> Result<GradCheckReport> {
    let first = objective.value(store)?;
    let second = objective.value(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let (_, analytic) = objective.value_and_grad(store)?;
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut per_param = Vec::with_capacity(names.len());
    for name in names {
        let count = probe.value(&name)?.len();
        let zeros;
        let ad = match analytic.get(&name) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(probe.value(&name)?.shape());
                &zeros
            }
        };
        let mut worst = 0.0f64;
        for i in 0..count {
            let orig = probe.value(&name)?.data()[i];
            probe.value_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = objective.value(&probe)?;
            probe.value_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = objective.value(&probe)?;
            probe.value_mut(&name)?.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let g = ad.data()[i];
            let err = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
            worst = worst.max(err);
        }
        per_param.push((name, worst));
    }
    let (worst, max_error) = per_param
        .iter()
        .fold((None, 0.0f64), |(wn, we), (n, e)| if *e > we || wn.is_none() { (Some(n.clone()), *e) } else { (wn, we) });
    Ok(GradCheckReport {
        per_param,
        max_error,
        worst,
    })
}
