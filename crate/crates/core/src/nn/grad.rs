use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;

/// Identity of a learnable parameter within one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Alpha,
    BnScale,
    BnShift,
    PReluSlope,
}

/// Gradients of one backward pass: the input gradient plus per-parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle<T> {
    pub input: Option<Tensor<T>>,
    params: BTreeMap<ParamKind, Tensor<T>>,
}

impl<T> Default for GradBundle<T> {
    fn default() -> Self {
        GradBundle {
            input: None,
            params: BTreeMap::new(),
        }
    }
}

impl<T> GradBundle<T> {
    pub fn with_input(input: Tensor<T>) -> Self {
        GradBundle {
            input: Some(input),
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, kind: ParamKind, grad: Tensor<T>) {
        self.params.insert(kind, grad);
    }

    pub fn param(&self, kind: ParamKind) -> Option<&Tensor<T>> {
        self.params.get(&kind)
    }

    pub fn take(&mut self, kind: ParamKind) -> Option<Tensor<T>> {
        self.params.remove(&kind)
    }

    /// Moves every parameter gradient of `other` into `self`.
    pub fn absorb(&mut self, other: GradBundle<T>) {
        self.params.extend(other.params);
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamKind, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}
