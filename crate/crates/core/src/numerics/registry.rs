//! Named parameter storage with the freezing ledger.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Mat;
use crate::error::{Error, Result};

/// Training stage a tensor was created in: 0 is base training, `k ≥ 1` the
/// k-th novel registration session.
pub type Stage = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub value: Mat,
    pub trainable: bool,
    /// Structurally frozen tensors (textual prototypes) can only be unfrozen in
    /// an explicit ablation.
    pub structural: bool,
    pub stage: Stage,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterRegistry {
    entries: BTreeMap<String, ParamEntry>,
}

/// SHA-256 over `rows‖cols‖data` in little-endian.
pub fn tensor_checksum(m: &Mat) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat, stage: Stage) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                value,
                trainable: false,
                structural: false,
                stage,
            },
        );
    }

    pub fn insert_structural(&mut self, name: impl Into<String>, value: Mat, stage: Stage) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                value,
                trainable: false,
                structural: true,
                stage,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Registry(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.entry(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Registry(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn freeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.trainable = false;
        }
    }

    /// Marks `name` trainable. Structural tensors are refused unless
    /// `allow_structural` is set.
    pub fn set_trainable(&mut self, name: &str, allow_structural: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Registry(format!("unknown parameter `{name}`")))?;
        if e.structural && !allow_structural {
            return Err(Error::Registry(format!(
                "`{name}` is structurally frozen"
            )));
        }
        e.trainable = true;
        Ok(())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn checksum(&self, name: &str) -> Result<String> {
        self.get(name).map(tensor_checksum)
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), tensor_checksum(&e.value)))
            .collect()
    }

    /// Checksums of every tensor created in `stage` or earlier.
    pub fn checksums_through(&self, stage: Stage) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.stage <= stage)
            .map(|(n, e)| (n.clone(), tensor_checksum(&e.value)))
            .collect()
    }
}

/// Registry tensors bound as leaves on one tape.
pub struct Bound<'r> {
    registry: &'r ParameterRegistry,
    vars: BTreeMap<String, Var>,
}

impl<'r> Bound<'r> {
    pub fn new(registry: &'r ParameterRegistry) -> Self {
        Self {
            registry,
            vars: BTreeMap::new(),
        }
    }

    pub fn registry(&self) -> &'r ParameterRegistry {
        self.registry
    }

    /// Leaf for `name`; requires a gradient only if the tensor is trainable.
    pub fn param(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let e = self.registry.entry(name)?;
        let v = tape.leaf(e.value.clone(), e.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients of every bound trainable tensor. Bound tensors that did not
    /// influence the output get an explicit zero gradient.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.vars {
            let e = &self.registry.entries[name];
            if !e.trainable {
                continue;
            }
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Mat::zeros(e.value.rows(), e.value.cols()));
            out.insert(name.clone(), g);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structural_tensors_refuse_unfreezing() {
        let mut r = ParameterRegistry::new();
        r.insert_structural("bank.pt.1", Mat::zeros(1, 4), 0);
        r.insert("bank.pc.1", Mat::zeros(1, 4), 0);
        assert!(r.set_trainable("bank.pt.1", false).is_err());
        r.set_trainable("bank.pt.1", true).unwrap();
        r.set_trainable("bank.pc.1", false).unwrap();
        assert_eq!(r.trainable_count(), 8);
    }

    #[test]
    fn checksum_tracks_bytes_and_shape() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(3, 2);
        assert_ne!(tensor_checksum(&a), tensor_checksum(&b));
        let mut c = a.clone();
        assert_eq!(tensor_checksum(&a), tensor_checksum(&c));
        c.set(0, 0, -0.0);
        assert_ne!(tensor_checksum(&a), tensor_checksum(&c));
    }

    #[test]
    fn frozen_params_are_constants_on_tape() {
        let mut r = ParameterRegistry::new();
        r.insert("a", Mat::filled(1, 2, 1.0), 0);
        r.insert("b", Mat::filled(1, 2, 2.0), 0);
        r.set_trainable("b", false).unwrap();
        let mut tape = Tape::new();
        let mut bound = Bound::new(&r);
        let a = bound.param(&mut tape, "a").unwrap();
        let b = bound.param(&mut tape, "b").unwrap();
        let y = tape.mul(a, b);
        let s = tape.sum(y);
        let g = tape.backward(s);
        let grads = bound.gradients(&g);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["b"].data(), &[1.0, 1.0]);
    }
}
