use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Named trainable tensors together with their Adam moments.
///
/// Every clone gets a fresh identity, so graphs never confuse bindings
/// from two copies of the same set.
#[derive(Debug)]
pub struct ParameterSet {
    id: u64,
    version: u64,
    step: u64,
    values: BTreeMap<String, Tensor>,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl Clone for ParameterSet {
    fn clone(&self) -> Self {
        ParameterSet {
            id: fresh_id(),
            version: self.version,
            step: self.step,
            values: self.values.clone(),
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
        }
    }
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.values == other.values
            && self.first_moment == other.first_moment
            && self.second_moment == other.second_moment
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet {
            id: fresh_id(),
            version: 0,
            step: 0,
            values: BTreeMap::new(),
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    /// Incremented on every mutation of parameter values.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Number of Adam updates applied.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.values.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.first_moment
            .insert(name.to_string(), Tensor::zeros(value.shape()));
        self.second_moment
            .insert(name.to_string(), Tensor::zeros(value.shape()));
        self.values.insert(name.to_string(), value);
        self.version += 1;
        Ok(())
    }

    /// Inserts `shape` drawn from `N(0, gain² / fan_in)`.
    pub fn insert_fan_in_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    /// Replaces a value in place; the shape is fixed at insertion.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .values
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "parameter set",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        self.version += 1;
        Ok(())
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.first_moment.get(name)?, self.second_moment.get(name)?))
    }

    pub(crate) fn restore_optimizer(
        &mut self,
        step: u64,
        moments: BTreeMap<String, (Tensor, Tensor)>,
    ) -> Result<()> {
        for (name, (m, v)) in moments {
            let shape = self
                .values
                .get(&name)
                .ok_or_else(|| Error::Contract(format!("moment for unknown parameter `{name}`")))?
                .shape()
                .to_vec();
            if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                return Err(Error::shape("restore_optimizer", name));
            }
            self.first_moment.insert(name.clone(), m);
            self.second_moment.insert(name, v);
        }
        self.step = step;
        self.version += 1;
        Ok(())
    }

    pub fn norms(&self) -> BTreeMap<String, f64> {
        self.values
            .iter()
            .map(|(k, v)| (k.clone(), v.norm()))
            .collect()
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients before
    /// touching any state.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        for (name, value) in &self.values {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing gradient for `{name}`")))?;
            if g.shape() != value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{name}` is {:?}, gradient {:?}", value.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, value) in self.values.iter_mut() {
            let g = grads.get(name).expect("checked above");
            let m = self.first_moment.get_mut(name).expect("moments track values");
            let v = self.second_moment.get_mut(name).expect("moments track values");
            for (((p, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.version += 1;
        Ok(())
    }
}

/// Gradient tensors keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Gradients {
            map: params
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(Error::shape(
                "gradients",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            )),
            None => Err(Error::Contract(format!("unknown parameter `{name}`"))),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        for (name, slot) in self.map.iter_mut() {
            let o = other
                .map
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing gradient for `{name}`")))?;
            for (a, b) in slot.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::full(&[3], value)).unwrap();
        p
    }

    fn grads_of(p: &ParameterSet, value: f64) -> Gradients {
        let mut g = Gradients::zeros_like(p);
        g.set("w", Tensor::full(&[3], value)).unwrap();
        g
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameters_unchanged() {
        let mut p = one_param(0.7);
        let g = grads_of(&p, 0.0);
        p.adam_step(&g, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.7; 3]);
        assert_eq!(p.step(), 1);
    }

    #[test]
    fn constant_gradient_drifts_at_learning_rate() {
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut p = one_param(0.0);
        let g = grads_of(&p, 0.37);
        let mut prev = 0.0;
        for _ in 0..200 {
            p.adam_step(&g, &cfg).unwrap();
            let now = p.get("w").unwrap().data()[0];
            let delta = now - prev;
            assert!(delta < 0.0);
            assert!((delta.abs() - cfg.lr).abs() < 0.01 * cfg.lr);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut p = one_param(1.0);
        let g = grads_of(&p, f64::NAN);
        let before = p.clone();
        assert!(matches!(
            p.adam_step(&g, &AdamConfig::default()),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p, before);
    }

    #[test]
    fn seeded_initialization_is_bitwise_reproducible() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut p = ParameterSet::new();
            p.insert_fan_in_normal("a", &[4, 5], 5, 1.0, &mut rng).unwrap();
            let g = grads_of_shape(&p);
            p.adam_step(&g, &AdamConfig::default()).unwrap();
            p
        };
        assert_eq!(make(), make());
    }

    fn grads_of_shape(p: &ParameterSet) -> Gradients {
        let mut g = Gradients::zeros_like(p);
        g.set("a", Tensor::from_fn(&[4, 5], |i| i as f64 - 7.5)).unwrap();
        g
    }

    #[test]
    fn duplicate_names_and_shape_changes_are_rejected() {
        let mut p = one_param(0.0);
        assert!(p.insert("w", Tensor::zeros(&[3])).is_err());
        assert!(p.set("w", Tensor::zeros(&[4])).is_err());
    }
}
