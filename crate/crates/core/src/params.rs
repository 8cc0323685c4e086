//! Named parameter storage shared by the model, optimizer and checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};

/// Role of a parameter in the adapted model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Positional,
    Lora,
    Prompts,
    Heads,
    Pretext,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Positional => "positional",
            ParamGroup::Lora => "lora",
            ParamGroup::Prompts => "prompts",
            ParamGroup::Heads => "heads",
            ParamGroup::Pretext => "pretext",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            tensor,
            group,
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Marks every parameter of `group` trainable or frozen.
    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.trainable = trainable;
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entry(id).trainable).collect()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Overwrites the value of `name`, checking that the shape is unchanged.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let current = self.get(id);
        if current.shape() != tensor.shape() {
            return Err(Error::Config(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                tensor.shape(),
                current.shape()
            )));
        }
        self.entries[id.0].tensor = tensor;
        Ok(())
    }

    /// Records every parameter on `tape` as a leaf. `requires_grad` decides
    /// which leaves participate in backward.
    pub fn bind(&self, tape: &mut Tape, requires_grad: impl Fn(&ParamEntry) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.tensor.clone(), requires_grad(e)))
            .collect();
        Bound { vars }
    }

    /// Binds with gradients for trainable parameters only.
    pub fn bind_trainable(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |e| e.trainable)
    }

    /// Binds everything as constants.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| false)
    }

    /// Uses `trainable` (one var per entry of [`Self::trainable_ids`], in
    /// order) for trainable parameters and constants for the rest.
    pub fn bind_with(&self, tape: &mut Tape, trainable: &[Var]) -> Result<Bound> {
        let mut given = trainable.iter();
        let mut vars = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.trainable {
                let v = *given
                    .next()
                    .ok_or_else(|| Error::Contract("too few vars for trainable parameters".into()))?;
                if tape.shape(v) != e.tensor.shape() {
                    return Err(Error::dim("bind_with", tape.shape(v), e.tensor.shape()));
                }
                vars.push(v);
            } else {
                vars.push(tape.constant(e.tensor.clone()));
            }
        }
        if given.next().is_some() {
            return Err(Error::Contract("more vars than trainable parameters".into()));
        }
        Ok(Bound { vars })
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Frozen-weight affine map `y = x·Wᵀ + b` with `W: [out×in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[out_dim, in_dim], std, rng),
            group,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), group);
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul_nt(x, bound.var(self.weight))?;
        tape.add_row(y, bound.var(self.bias))
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[1]
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assign_checks_shape() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2]), ParamGroup::Heads);
        assert!(s.assign("w", Tensor::ones(&[2, 2])).is_ok());
        assert!(s.assign("w", Tensor::ones(&[4])).is_err());
        assert!(s.assign("nope", Tensor::ones(&[4])).is_err());
    }

    #[test]
    fn group_freezing() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[1]), ParamGroup::Backbone);
        let b = s.add("b", Tensor::zeros(&[1]), ParamGroup::Lora);
        s.set_group_trainable(ParamGroup::Backbone, false);
        assert_eq!(s.trainable_ids(), vec![b]);
        assert!(!s.entry(a).trainable);
    }
}
