use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Handle to a [`Parameter`] inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its accumulated gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
}

impl<T: Element> Parameter<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let n = value.numel();
        Self { name, value, grad: None, adam_m: vec![T::zero(); n], adam_v: vec![T::zero(); n] }
    }
}

/// Named collection of parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalars across all parameters, or those whose name
    /// starts with `prefix`.
    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of every parameter bound to `tape` into the
    /// store. Repeated calls accumulate.
    pub fn accumulate(&mut self, tape: &Tape<T>) {
        for (id, var) in tape.bound_params() {
            let Some(g) = tape.grad(var) else { continue };
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    /// Replaces every parameter value from `(name, tensor)` pairs. Each
    /// parameter must be supplied exactly once with a matching shape.
    pub fn load<U: Element>(&mut self, entries: &[(String, Tensor<U>)]) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, tensor) in entries {
            let id = self.id(name).ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter {name:?}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != tensor.shape() {
                return Err(TensorError::Dimension {
                    op: "load",
                    left: p.value.shape().to_vec(),
                    right: tensor.shape().to_vec(),
                });
            }
            p.value = tensor.cast();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(TensorError::Checkpoint(format!(
                "parameter {:?} missing from checkpoint",
                self.params[missing].name
            )));
        }
        Ok(())
    }

    /// Converts every value (and moment buffer) to another element type.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    adam_m: p.adam_m.iter().map(|&v| U::lit(v.as_f64())).collect(),
                    adam_v: p.adam_v.iter().map(|&v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::zeros(vec![2])).unwrap();
        assert!(store.add("a.weight", Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn moments_start_at_zero() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::full(vec![3], 1.5)).unwrap();
        let p = store.get(id);
        assert!(p.adam_m.iter().chain(&p.adam_v).all(|&v| v == 0.0));
        assert!(p.grad.is_none());
    }

    #[test]
    fn load_requires_every_parameter() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(vec![2])).unwrap();
        store.add("b", Tensor::zeros(vec![1])).unwrap();
        let partial = vec![("a".to_string(), Tensor::<f32>::full(vec![2], 1.0))];
        assert!(store.load(&partial).is_err());
        let wrong =
            vec![("a".to_string(), Tensor::<f32>::zeros(vec![3])), ("b".to_string(), Tensor::<f32>::zeros(vec![1]))];
        assert!(matches!(store.load(&wrong), Err(TensorError::Dimension { .. })));
    }
}
