//! Named parameter storage shared by every trainable model.
//!
//! Parameters live outside the tape; each forward pass registers them as
//! leaves and reads gradients back out after `backward`. Registration order
//! is the insertion order, so a [`ParamSlot`] indexes both the set and the
//! binding produced for a tape.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::Tensor;

/// Index of a parameter within a [`ParamSet`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot(pub(crate) usize);

/// Ordered, uniquely named collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

/// Tape handles for one registration of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Binding {
    ids: Vec<ValueId>,
}

impl Binding {
    /// Tape handle for a slot.
    pub fn id(&self, slot: ParamSlot) -> ValueId {
        self.ids[slot.0]
    }

    /// Adopt externally registered leaves (one per slot, in slot order).
    /// Used by gradient-check closures that bind parameters themselves.
    pub fn from_ids(ids: Vec<ValueId>) -> Self {
        Binding { ids }
    }
}

impl ParamSet {
    /// Empty set.
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    /// Add a named tensor; names must be unique within the set.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamSlot {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name:?}"
        );
        self.entries.push((name, tensor));
        ParamSlot(self.entries.len() - 1)
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// True when the set holds no tensors.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Iterate `(name, tensor)` pairs in slot order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Name of a slot.
    pub fn name(&self, slot: ParamSlot) -> &str {
        &self.entries[slot.0].0
    }

    /// Tensor stored in a slot.
    pub fn tensor(&self, slot: ParamSlot) -> &Tensor {
        &self.entries[slot.0].1
    }

    /// Look up a tensor by name.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Look up a slot by name.
    pub fn slot(&self, name: &str) -> Option<ParamSlot> {
        self.entries
            .iter()
            .position(|(n, _)| n == name)
            .map(ParamSlot)
    }

    /// Replace the tensor in a slot, keeping its shape.
    pub fn set_tensor(&mut self, slot: ParamSlot, tensor: Tensor) -> Result<()> {
        let current = &self.entries[slot.0];
        if current.1.shape() != tensor.shape() {
            return Err(Error::shape(
                "ParamSet::set_tensor",
                format!(
                    "parameter {:?} has shape {:?}, replacement has {:?}",
                    current.0,
                    current.1.shape(),
                    tensor.shape()
                ),
            ));
        }
        self.entries[slot.0].1 = tensor;
        Ok(())
    }

    /// Register every parameter on a tape as a gradient target.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.bind_with(tape, true)
    }

    /// Register every parameter as a constant (frozen) leaf.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect();
        Binding { ids }
    }

    /// Collect gradients for every slot after a backward pass. Parameters a
    /// loss does not reach get zero gradients.
    pub fn collect_grads(&self, tape: &Tape, binding: &Binding) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(&binding.ids)
            .map(|((_, t), &id)| match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    /// SHA-256 over names, shapes, and exact parameter bytes. Two sets hash
    /// equal iff they are bitwise identical.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.entries {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &dim in tensor.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}
