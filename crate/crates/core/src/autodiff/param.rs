use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor with a gradient buffer. `trainable == false` is the unit
/// of freezing: optimizers never touch the value and backward never writes
/// the gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Owns every parameter of a model, addressable by id or by unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "parameter" });
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            grad: Tensor::zeros_like(&value),
            name: name.clone(),
            value,
            trainable,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::UnknownParameters(vec![name.to_string()]))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn count(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Freezes exactly the named parameters. Every name must exist.
    pub fn freeze(&mut self, names: &[String]) -> Result<()> {
        let missing: Vec<String> = names
            .iter()
            .filter(|n| !self.by_name.contains_key(n.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::UnknownParameters(missing));
        }
        for n in names {
            let id = self.by_name[n.as_str()];
            self.params[id.0].trainable = false;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }

    /// SHA-256 over names and the bit patterns of values, optionally limited
    /// to a subset of names. Used to prove frozen tensors are untouched.
    pub fn digest(&self, only: Option<&[String]>) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            if let Some(subset) = only {
                if !subset.iter().any(|n| n == &p.name) {
                    continue;
                }
            }
            hasher.update(p.name.as_bytes());
            hasher.update([0u8]);
            for v in p.value.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(1, 2), true).unwrap();
        assert!(matches!(
            s.insert("a", Tensor::zeros(1, 2), true),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn freeze_reports_missing_names() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(2, 2), true).unwrap();
        s.insert("b", Tensor::zeros(1, 3), true).unwrap();
        let err = s
            .freeze(&["a".into(), "zz".into(), "yy".into()])
            .unwrap_err();
        match err {
            Error::UnknownParameters(m) => assert_eq!(m, vec!["zz".to_string(), "yy".to_string()]),
            e => panic!("unexpected {e}"),
        }
        // nothing frozen on error
        assert!(s.is_trainable(s.id("a").unwrap()));
        s.freeze(&["a".into()]).unwrap();
        assert_eq!(s.count(true), 3);
        assert_eq!(s.count(false), 7);
    }
}
