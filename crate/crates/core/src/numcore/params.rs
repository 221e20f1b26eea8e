use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// One named trainable tensor and its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
    /// Frozen parameters are skipped by the optimizer.
    pub trainable: bool,
}

/// Ordered collection of named parameters with parallel gradients.
///
/// Models address their tensors by the index returned from [`ParamSet::push`];
/// the names are used for checkpoints and diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor2) -> usize {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.entries.push(Param {
            name: name.into(),
            value,
            grad,
            trainable: true,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    #[inline]
    pub fn value(&self, idx: usize) -> &Tensor2 {
        &self.entries[idx].value
    }

    #[inline]
    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor2 {
        &mut self.entries[idx].value
    }

    #[inline]
    pub fn grad(&self, idx: usize) -> &Tensor2 {
        &self.entries[idx].grad
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Installs freshly computed gradients, one per entry in order.
    pub fn set_grads(&mut self, grads: Vec<Tensor2>) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::dim("set_grads", self.entries.len(), grads.len()));
        }
        for (p, g) in self.entries.iter_mut().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::dim(
                    "set_grads",
                    format!("{} {:?}", p.name, p.value.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            p.grad = g;
        }
        Ok(())
    }

    /// Zero-filled gradient buffers matching every parameter's shape.
    pub fn zeros_like(&self) -> Vec<Tensor2> {
        self.entries
            .iter()
            .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
            .collect()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.entries {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Bitwise equality of all parameter values (gradients ignored).
    pub fn values_bitwise_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
