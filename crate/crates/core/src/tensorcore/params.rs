use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            tensor,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.entries[id.0].trainable = flag;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Records every parameter as a tape leaf. With `train` false, or for
    /// frozen entries, the leaf does not require gradient.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                let t = e.tensor.clone().requires_grad(train && e.trainable);
                tape.leaf(&t)
            })
            .collect()
    }

    /// Adds the tape gradients of bound leaves into each parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (e, v) in self.entries.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(*v) {
                e.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// `self <- rho * src + (1 - rho) * self`, entry by entry.
    pub fn soft_update_from(&mut self, src: &ParamStore, rho: f64) -> Result<()> {
        self.check_layout(src)?;
        for (dst, s) in self.entries.iter_mut().zip(&src.entries) {
            for (d, x) in dst.tensor.data_mut().iter_mut().zip(s.tensor.data()) {
                *d = rho * x + (1.0 - rho) * *d;
            }
        }
        Ok(())
    }

    pub fn copy_values_from(&mut self, src: &ParamStore) -> Result<()> {
        self.check_layout(src)?;
        for (dst, s) in self.entries.iter_mut().zip(&src.entries) {
            dst.tensor.data_mut().copy_from_slice(s.tensor.data());
        }
        Ok(())
    }

    fn check_layout(&self, other: &ParamStore) -> Result<()> {
        let same = self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape());
        if same {
            Ok(())
        } else {
            Err(Error::Contract("parameter stores have different layouts".into()))
        }
    }

    /// Overwrites values by name; every stored name must be present with
    /// matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for e in &mut self.entries {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| Error::Contract(format!("missing tensor '{}'", e.name)))?;
            if t.shape() != e.tensor.shape() {
                return Err(Error::Contract(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
