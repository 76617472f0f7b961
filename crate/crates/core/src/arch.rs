//! Architecture registry: every sequence model sits behind
//! [`SequenceModel`] and is selected by name at runtime, so the training
//! loop, evaluator, checkpointer, and CLI are architecture-agnostic.

use crate::cnn::{CnnModel, CnnSpec};
use crate::data::TokenSequence;
use crate::model::{HeadKind, MambaModel, ModelError, ModelSpec};
use crate::params::{BoundParams, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};
use serde::{Deserialize, Serialize};

/// Self-describing architecture + hyperparameters, stored in checkpoint
/// headers and run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ArchSpec {
    Mamba(ModelSpec),
    Cnn(CnnSpec),
}

impl ArchSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ArchSpec::Mamba(_) => "mamba",
            ArchSpec::Cnn(_) => "cnn",
        }
    }

    pub fn head(&self) -> HeadKind {
        match self {
            ArchSpec::Mamba(s) => s.head,
            ArchSpec::Cnn(s) => s.head,
        }
    }

    pub fn set_head(&mut self, head: HeadKind) {
        match self {
            ArchSpec::Mamba(s) => s.head = head,
            ArchSpec::Cnn(s) => s.head = head,
        }
    }
}

/// Common interface over trainable sequence-to-scalar models.
pub trait SequenceModel<F: Scalar> {
    fn arch_name(&self) -> &'static str;
    fn head(&self) -> HeadKind;
    fn arch_spec(&self) -> ArchSpec;
    fn params(&self) -> &ParamSet<F>;
    fn params_mut(&mut self) -> &mut ParamSet<F>;

    /// Raw scalar score for one sequence (pre-sigmoid for classification).
    fn forward_score(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        tokens: &TokenSequence,
    ) -> Result<TensorId, ModelError>;
}

impl<F: Scalar> SequenceModel<F> for MambaModel<F> {
    fn arch_name(&self) -> &'static str {
        "mamba"
    }

    fn head(&self) -> HeadKind {
        self.spec.head
    }

    fn arch_spec(&self) -> ArchSpec {
        ArchSpec::Mamba(self.spec.clone())
    }

    fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    fn forward_score(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        tokens: &TokenSequence,
    ) -> Result<TensorId, ModelError> {
        self.forward_task(tape, bound, tokens)
    }
}

impl<F: Scalar> SequenceModel<F> for CnnModel<F> {
    fn arch_name(&self) -> &'static str {
        "cnn"
    }

    fn head(&self) -> HeadKind {
        self.spec.head
    }

    fn arch_spec(&self) -> ArchSpec {
        ArchSpec::Cnn(self.spec.clone())
    }

    fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    fn forward_score(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        tokens: &TokenSequence,
    ) -> Result<TensorId, ModelError> {
        self.forward(tape, bound, tokens)
    }
}

/// Registry row: an architecture name plus a one-line summary.
pub struct ArchEntry {
    pub name: &'static str,
    pub summary: &'static str,
}

/// Registered architectures, selection order stable.
pub const REGISTRY: &[ArchEntry] = &[
    ArchEntry {
        name: "mamba",
        summary: "selective state-space backbone with LM pretraining support",
    },
    ArchEntry {
        name: "cnn",
        summary: "four-layer 1D convolutional baseline",
    },
];

pub fn arch_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|e| e.name).collect()
}

pub fn is_registered(name: &str) -> bool {
    REGISTRY.iter().any(|e| e.name == name)
}

/// Freshly initialized model for a spec. `scan` picks the recurrence kernel
/// for state-space models and is ignored by architectures without one.
pub fn build_model<F: Scalar>(
    spec: &ArchSpec,
    seed: u64,
    scan: &str,
) -> Result<Box<dyn SequenceModel<F>>, ModelError> {
    match spec {
        ArchSpec::Mamba(s) => Ok(Box::new(
            MambaModel::init(s.clone(), seed)?.with_scan(scan)?,
        )),
        ArchSpec::Cnn(s) => Ok(Box::new(CnnModel::init(s.clone(), seed)?)),
    }
}

/// Model wrapping existing parameters (checkpoint load path).
pub fn model_from_params<F: Scalar>(
    spec: &ArchSpec,
    params: ParamSet<F>,
    scan: &str,
) -> Result<Box<dyn SequenceModel<F>>, ModelError> {
    match spec {
        ArchSpec::Mamba(s) => Ok(Box::new(
            MambaModel::from_parts(s.clone(), params)?.with_scan(scan)?,
        )),
        ArchSpec::Cnn(s) => Ok(Box::new(CnnModel::from_parts(s.clone(), params)?)),
    }
}

/// Rebuild a model under a different head: backbone tensors carry over by
/// name and shape, the previous head (LM or task) is dropped, and the new
/// head is freshly initialized from `seed`.
pub fn convert_to_head<F: Scalar>(
    spec: &ArchSpec,
    params: &ParamSet<F>,
    head: HeadKind,
    seed: u64,
    scan: &str,
) -> Result<Box<dyn SequenceModel<F>>, ModelError> {
    let mut new_spec = spec.clone();
    new_spec.set_head(head);
    let mut model = build_model(&new_spec, seed, scan)?;
    let fresh = model.params_mut();
    for i in 0..fresh.len() {
        let name = fresh.name_at(i).to_string();
        if name == "lm_head" || name.starts_with("head_") {
            continue;
        }
        if let Some(old) = params.get(&name) {
            if old.shape() == fresh.tensor_at(i).shape() {
                *fresh.tensor_at_mut(i) = old.clone();
            }
        }
    }
    Ok(model)
}
