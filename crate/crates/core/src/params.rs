//! Named parameter storage shared by the generator, optimizer and
//! checkpoint code.

use std::collections::BTreeMap;

use crate::error::{Result, ZfError};
use crate::graph::{Graph, VarId};
use crate::rng::fnv1a;
use crate::tensor::Tensor;

/// Ordered map of parameter path -> tensor. Iteration is name-sorted, which
/// keeps checkpoints and checksums stable.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    /// Replace an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(ZfError::Shape(format!(
                        "parameter {name}: cannot replace shape {:?} with {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                }
                *slot = value;
                Ok(())
            }
            None => Err(ZfError::Parameter(format!("unknown parameter {name}"))),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Checksum over the exact bit patterns of every parameter matching the
    /// filter, in name order.
    pub fn checksum_filtered(&self, mut filter: impl FnMut(&str) -> bool) -> u64 {
        let mut acc = Vec::new();
        for (name, tensor) in &self.entries {
            if filter(name) {
                acc.extend_from_slice(name.as_bytes());
                acc.extend_from_slice(&tensor.checksum().to_le_bytes());
            }
        }
        fnv1a(&acc)
    }

    pub fn checksum(&self) -> u64 {
        self.checksum_filtered(|_| true)
    }
}

/// Per-graph binding of a [`ParamStore`]: trainable parameters become leaves,
/// frozen ones constants, so gradient routing is decided once per step.
pub struct GraphParams {
    vars: BTreeMap<String, VarId>,
}

impl GraphParams {
    pub fn bind(
        graph: &mut Graph,
        store: &ParamStore,
        mut trainable: impl FnMut(&str) -> bool,
    ) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in store.iter() {
            let var = if trainable(name) {
                graph.leaf(tensor.clone())
            } else {
                graph.constant(tensor.clone())
            };
            vars.insert(name.clone(), var);
        }
        GraphParams { vars }
    }

    /// All-frozen binding, for inference passes.
    pub fn bind_frozen(graph: &mut Graph, store: &ParamStore) -> Self {
        Self::bind(graph, store, |_| false)
    }

    pub fn var(&self, name: &str) -> VarId {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &VarId)> {
        self.vars.iter()
    }
}
