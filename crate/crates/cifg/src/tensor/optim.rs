//! Named parameter storage and the Adam optimizer.
//!
//! A [`ParamStore`] owns the persistent values of every named array in a
//! model (trainable weights, frozen weights, running statistics). Each
//! training step materializes the store as [`Leaves`] — fresh graph leaves,
//! gradient-requiring for trainable entries — runs forward/backward, then
//! applies [`Adam::step`] to fold the collected gradients back into the
//! store.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its store. Stable for the store's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// Ordered, name-addressed collection of model arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Internal(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<f64>) {
        debug_assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Fresh graph leaves for one forward/backward pass. Trainable entries
    /// become gradient-requiring leaves, everything else constants.
    pub fn leaves(&self) -> Leaves {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    Tensor::param(e.value.clone())
                } else {
                    Tensor::constant(e.value.clone())
                }
            })
            .collect();
        Leaves { tensors }
    }

    /// All values keyed by name (for serialization and freeze checks).
    pub fn snapshot(&self) -> BTreeMap<String, ArrayD<f64>> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Overwrite values from a checkpoint map. Every entry must be present
    /// with a matching shape; unknown names in `map` are ignored by design
    /// (checkpoints may carry optimizer state under "opt/").
    pub fn load_from(&mut self, map: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        for e in &mut self.entries {
            let v = map.get(&e.name).ok_or_else(|| {
                Error::Data(format!("checkpoint missing parameter {}", e.name))
            })?;
            if v.shape() != e.value.shape() {
                return Err(Error::Data(format!(
                    "checkpoint shape mismatch for {}: {:?} vs {:?}",
                    e.name,
                    v.shape(),
                    e.value.shape()
                )));
            }
            e.value = v.clone();
        }
        Ok(())
    }
}

/// Per-step leaf tensors aligned with a [`ParamStore`].
pub struct Leaves {
    tensors: Vec<Tensor>,
}

impl Leaves {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Adopt externally built leaves (gradient-checking helpers). Order must
    /// match the store the ids came from.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Leaves {
        Leaves { tensors }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment arrays are kept per store entry;
/// untouched (gradient-free) parameters stay bitwise identical.
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Adam {
        let m = store
            .entries()
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        let v = store
            .entries()
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        Adam {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all trainable entries, reading gradients from the
    /// leaves of the step that just ran backward. `lr_scale` multiplies the
    /// base learning rate (warmup). Gradient-free entries are skipped
    /// entirely; a NaN gradient aborts, naming the parameter.
    pub fn step(&mut self, store: &mut ParamStore, leaves: &Leaves, lr_scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        let lr = self.cfg.lr * lr_scale;
        for (idx, entry) in store.entries.iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let Some(grad) = leaves.tensors[idx].grad() else {
                continue;
            };
            if grad.iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric(format!(
                    "NaN gradient in parameter {}",
                    entry.name
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut *m).and(&grad).for_each(|mi, &gi| {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(&grad).for_each(|vi, &gi| {
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi;
            });
            ndarray::Zip::from(&mut entry.value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / c1;
                    let vhat = vi / c2;
                    *p -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
                });
        }
        Ok(())
    }

    /// Moment arrays and counters keyed for checkpointing under "opt/".
    pub fn snapshot(&self, store: &ParamStore) -> BTreeMap<String, ArrayD<f64>> {
        let mut map = BTreeMap::new();
        map.insert(
            "opt/step".to_string(),
            ArrayD::from_elem(ndarray::IxDyn(&[]), self.step as f64),
        );
        for (idx, e) in store.entries().iter().enumerate() {
            if !e.trainable {
                continue;
            }
            map.insert(format!("opt/m/{}", e.name), self.m[idx].clone());
            map.insert(format!("opt/v/{}", e.name), self.v[idx].clone());
        }
        map
    }

    pub fn restore(&mut self, store: &ParamStore, map: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        if let Some(step) = map.get("opt/step") {
            self.step = step.iter().next().copied().unwrap_or(0.0) as u64;
        }
        for (idx, e) in store.entries().iter().enumerate() {
            if !e.trainable {
                continue;
            }
            if let Some(m) = map.get(&format!("opt/m/{}", e.name)) {
                self.m[idx] = m.clone();
            }
            if let Some(v) = map.get(&format!("opt/v/{}", e.name)) {
                self.v[idx] = v.clone();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn store_with(name: &str, vals: &[f64]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, arr1(vals).into_dyn(), true).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_matches_closed_form() {
        // g = 1 everywhere: mhat = 1, vhat = 1 -> delta = -lr / (1 + eps)
        let (mut store, id) = store_with("w", &[0.0, 0.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let leaves = store.leaves();
        let loss = leaves.get(id).sum_all();
        loss.backward().unwrap();
        adam.step(&mut store, &leaves, 1.0).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        for &v in store.value(id).iter() {
            assert!((v - expected).abs() < 1e-15, "v={v}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut store, id) = store_with("w", &[1.0, -2.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let leaves = store.leaves();
        let loss = leaves.get(id).mul_scalar(0.0).sum_all();
        loss.backward().unwrap();
        adam.step(&mut store, &leaves, 1.0).unwrap();
        assert_eq!(store.value(id), &arr1(&[1.0, -2.0]).into_dyn());
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let (mut store, id) = store_with("w", &[0.3, -0.7, 0.1]);
            let mut adam = Adam::new(&store, AdamConfig::default());
            for _ in 0..25 {
                let leaves = store.leaves();
                let w = leaves.get(id);
                let loss = w.mul(w).unwrap().sum_all();
                loss.backward().unwrap();
                adam.step(&mut store, &leaves, 1.0).unwrap();
            }
            store.value(id).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (mut store, id) = store_with("model/bad", &[1.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let leaves = store.leaves();
        let w = leaves.get(id);
        let inf = Tensor::constant(arr1(&[f64::INFINITY]).into_dyn());
        // adjoint of w is 0 * inf = NaN
        let loss = w.mul(&inf).unwrap().mul_scalar(0.0).sum_all();
        loss.backward().unwrap();
        let err = adam.step(&mut store, &leaves, 1.0).unwrap_err();
        assert!(err.to_string().contains("model/bad"), "{err}");
    }

    #[test]
    fn frozen_entries_never_move() {
        let mut store = ParamStore::new();
        let frozen = store
            .add("frozen", arr1(&[5.0, 6.0]).into_dyn(), false)
            .unwrap();
        let live = store.add("live", arr1(&[1.0]).into_dyn(), true).unwrap();
        let mut adam = Adam::new(&store, AdamConfig::default());
        let leaves = store.leaves();
        let loss = leaves
            .get(live)
            .mul(leaves.get(live))
            .unwrap()
            .sum_all()
            .add(&leaves.get(frozen).sum_all())
            .unwrap();
        loss.backward().unwrap();
        adam.step(&mut store, &leaves, 1.0).unwrap();
        assert_eq!(store.value(frozen), &arr1(&[5.0, 6.0]).into_dyn());
        assert!(store.value(live)[[0]] != 1.0);
    }
}
