use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::{DType, Gradients, Scalar, Tape, Tensor, TensorError, Var};

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies the tensors whose names satisfy `keep` into a new store.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites existing entries with the tensors of `other`; shapes must agree.
    pub fn update_from(&mut self, other: &Self) -> Result<(), TensorError> {
        for (name, t) in &other.tensors {
            let slot = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| TensorError::MissingTensor(name.clone()))?;
            if slot.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "update_from",
                    detail: format!("{name}: {:?} vs {:?}", slot.shape(), t.shape()),
                });
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Puts every tensor on `tape`; `trainable` decides which ones require gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.var(v.clone(), trainable(k))))
                .collect(),
        }
    }

    pub fn to_safetensors_bytes(&self) -> Result<Vec<u8>, TensorError> {
        let dtype = match T::DTYPE {
            DType::F32 => Dtype::F32,
            DType::F64 => Dtype::F64,
        };
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let mut buf = Vec::with_capacity(t.numel() * T::BYTES);
                for &v in t.data() {
                    v.write_le(&mut buf);
                }
                (k.clone(), t.shape().to_vec(), buf)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(k, shape, buf)| {
                TensorView::new(dtype, shape.clone(), buf)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| TensorError::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        safetensors::serialize(views, &None).map_err(|e| TensorError::Format(e.to_string()))
    }

    pub fn from_safetensors_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| TensorError::Format(e.to_string()))?;
        let expected = match T::DTYPE {
            DType::F32 => Dtype::F32,
            DType::F64 => Dtype::F64,
        };
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != expected {
                return Err(TensorError::Format(format!("{name}: dtype {:?}, expected {expected:?}", view.dtype())));
            }
            let data: Vec<T> = view.data().chunks(T::BYTES).map(T::read_le).collect();
            tensors.insert(name, Tensor::from_vec(view.shape(), data)?);
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let bytes = self.to_safetensors_bytes()?;
        std::fs::write(path, bytes).map_err(|e| TensorError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let bytes = std::fs::read(path).map_err(|e| TensorError::Io(path.display().to_string(), e))?;
        Self::from_safetensors_bytes(&bytes)
    }
}

/// A [`ParamStore`] placed on a tape.
pub struct Bound<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Panics on unknown names: parameter names are fixed at construction.
    pub fn get(&self, name: &str) -> Var<'t, T> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("no parameter named {name:?}"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Extracts the gradients of the bound variables that received one.
    pub fn collect_grads(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}
