use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor that may be trained.
///
/// A frozen parameter never enters the gradient tape and never owns a
/// gradient buffer; the optimizer skips it.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    value: Arc<Tensor>,
    frozen: bool,
    grad: Option<Tensor>,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Param {
                name,
                reason: "already registered".into(),
            });
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            frozen,
            grad: None,
        });
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

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Replaces a parameter's value; the new value must keep its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::Param {
                name: p.name.clone(),
                reason: format!(
                    "shape {:?} does not match registered shape {:?}",
                    value.shape(),
                    p.value.shape()
                ),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access to a parameter's values (copy-on-write if a tape still
    /// holds the old buffer).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        let p = &mut self.params[id.0];
        p.frozen = frozen;
        if frozen {
            p.grad = None;
        }
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) {
        let ids: Vec<ParamId> = self
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.set_frozen(id, frozen);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    /// Allocates a zero gradient for every trainable parameter that has none.
    pub fn ensure_grads(&mut self) {
        for p in &mut self.params {
            if !p.frozen && p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        debug_assert!(!p.frozen, "gradient reached frozen parameter {}", p.name);
        let buf = p
            .grad
            .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (a, b) in buf.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Total scalar count, optionally restricted by frozen state.
    pub fn count(&self, frozen: Option<bool>) -> usize {
        self.params
            .iter()
            .filter(|p| frozen.is_none_or(|f| p.frozen == f))
            .map(|p| p.value.len())
            .sum()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// `(name, value)` pairs for every parameter under `prefix`, in
    /// registration order.
    pub fn named_values(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| (p.name.clone(), (*p.value).clone()))
            .collect()
    }

    /// Loads every parameter under `prefix` from `entries`. Missing,
    /// unexpected and mis-shaped entries are errors naming the offender.
    pub fn load_named(&mut self, prefix: &str, entries: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        for (name, _) in entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            if !self.by_name.contains_key(name) {
                return Err(TensorError::Param {
                    name: name.clone(),
                    reason: "unexpected entry in archive".into(),
                });
            }
        }
        let targets: Vec<(ParamId, String)> = self
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, p)| (id, p.name.clone()))
            .collect();
        for (id, name) in &targets {
            let t = lookup.get(name.as_str()).ok_or_else(|| TensorError::Param {
                name: name.clone(),
                reason: "missing from archive".into(),
            })?;
            let expected = self.value(*id).shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(TensorError::Param {
                    name: name.clone(),
                    reason: format!(
                        "archive shape {:?} does not match expected shape {:?}",
                        t.shape(),
                        expected
                    ),
                });
            }
        }
        for (id, name) in targets {
            self.params[id.0].value = Arc::new((*lookup[name.as_str()]).clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2]), false).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2]), false).is_err());
    }

    #[test]
    fn freezing_drops_grad_buffers() {
        let mut s = ParamStore::new();
        let a = s.add("x.a", Tensor::zeros(&[2]), false).unwrap();
        s.accumulate_grad(a, &[1.0, 2.0]);
        assert!(s.grad(a).is_some());
        s.freeze_prefix("x.", true);
        assert!(s.grad(a).is_none());
        s.ensure_grads();
        assert!(s.grad(a).is_none());
    }

    #[test]
    fn load_reports_missing_and_misshaped_entries() {
        let mut s = ParamStore::new();
        s.add("m.w", Tensor::zeros(&[2, 2]), true).unwrap();
        s.add("m.b", Tensor::zeros(&[2]), true).unwrap();
        let err = s
            .load_named("m.", &[("m.w".into(), Tensor::ones(&[2, 2]))])
            .unwrap_err();
        assert!(err.to_string().contains("m.b"));
        let err = s
            .load_named(
                "m.",
                &[
                    ("m.w".into(), Tensor::ones(&[3, 2])),
                    ("m.b".into(), Tensor::ones(&[2])),
                ],
            )
            .unwrap_err()
            .to_string();
        assert!(err.contains("[3, 2]") && err.contains("[2, 2]"), "{err}");
        let err = s
            .load_named(
                "m.",
                &[
                    ("m.w".into(), Tensor::ones(&[2, 2])),
                    ("m.b".into(), Tensor::ones(&[2])),
                    ("m.extra".into(), Tensor::ones(&[1])),
                ],
            )
            .unwrap_err();
        assert!(err.to_string().contains("m.extra"));
    }
}
