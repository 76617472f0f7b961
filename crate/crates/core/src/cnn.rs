//! 1D-CNN baseline: learned embedding, four same-padded conv layers with
//! ReLU, global max pooling over time, and a linear scalar head. Shares the
//! tokenizer, training loop, and metric path with the SSM model so the
//! comparison is apples to apples.

use crate::data::TokenSequence;
use crate::model::{HeadKind, ModelError};
use crate::params::{BoundParams, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// CNN hyperparameters. Defaults are the four-layer 32/64/96/128 stack with
/// kernel sizes 6/8/10/12 and an embedding of width 32.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub filters: Vec<usize>,
    pub kernels: Vec<usize>,
    pub head: HeadKind,
}

impl Default for CnnSpec {
    fn default() -> Self {
        CnnSpec {
            vocab_size: crate::data::VOCAB_SIZE,
            embed_dim: 32,
            filters: vec![32, 64, 96, 128],
            kernels: vec![6, 8, 10, 12],
            head: HeadKind::Regression,
        }
    }
}

impl CnnSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.filters.len() != self.kernels.len() || self.filters.is_empty() {
            return Err(ModelError::InvalidSpec(format!(
                "filters ({}) and kernels ({}) must be equal-length and nonempty",
                self.filters.len(),
                self.kernels.len()
            )));
        }
        if self.filters.iter().chain(&self.kernels).any(|&v| v == 0)
            || self.vocab_size == 0
            || self.embed_dim == 0
        {
            return Err(ModelError::InvalidSpec(
                "all dimensions must be >= 1".into(),
            ));
        }
        if !self.head.is_task() {
            return Err(ModelError::InvalidSpec(
                "the CNN baseline has no language-model head".into(),
            ));
        }
        Ok(())
    }

    pub fn last_filters(&self) -> usize {
        *self.filters.last().unwrap()
    }
}

/// Expected parameter names and shapes, in init order.
pub fn cnn_param_layout(spec: &CnnSpec) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = vec![(
        "embed".into(),
        vec![spec.vocab_size, spec.embed_dim],
    )];
    let mut cin = spec.embed_dim;
    for (i, (&cout, &k)) in spec.filters.iter().zip(&spec.kernels).enumerate() {
        out.push((format!("conv.{i}.w"), vec![cout, cin, k]));
        out.push((format!("conv.{i}.b"), vec![cout]));
        cin = cout;
    }
    out.push(("head_w".into(), vec![spec.last_filters()]));
    out.push(("head_b".into(), vec![1]));
    out
}

/// Deterministic init: uniform ±1/sqrt(fan_in) weights, zero biases.
pub fn init_cnn_params<F: Scalar>(spec: &CnnSpec, seed: u64) -> ParamSet<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut sample = |shape: Vec<usize>, fan_in: usize| -> Tensor<F> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| F::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        Tensor::new(shape, data).expect("layout shapes are valid")
    };
    params.push(
        "embed",
        sample(vec![spec.vocab_size, spec.embed_dim], spec.embed_dim),
    );
    let mut cin = spec.embed_dim;
    for (i, (&cout, &k)) in spec.filters.iter().zip(&spec.kernels).enumerate() {
        params.push(format!("conv.{i}.w"), sample(vec![cout, cin, k], cin * k));
        params.push(format!("conv.{i}.b"), Tensor::zeros(vec![cout]));
        cin = cout;
    }
    // zero-init readout: gradients reach the convs only after the head
    // has moved, which keeps fine-tuning from trashing pretrained features
    params.push("head_w", Tensor::zeros(vec![spec.last_filters()]));
    params.push("head_b", Tensor::zeros(vec![1]));
    params
}

/// Scalar task score for one sequence. The PAD tail is trimmed before
/// embedding, so padded and unpadded inputs score identically.
pub fn forward_cnn<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    spec: &CnnSpec,
    tokens: &TokenSequence,
) -> Result<TensorId, ModelError> {
    let trimmed = tokens.trimmed();
    if trimmed.is_empty() {
        return Err(TensorError::Invalid("forward_cnn: empty sequence".into()).into());
    }
    for &id in trimmed.ids() {
        if id >= spec.vocab_size {
            return Err(TensorError::TokenOutOfRange {
                op: "forward_cnn",
                id,
                vocab: spec.vocab_size,
            }
            .into());
        }
    }
    let mut x = tape.embed(bound.id("embed"), trimmed.ids())?;
    for i in 0..spec.filters.len() {
        let conv = tape.conv1d_same(
            x,
            bound.id(&format!("conv.{i}.w")),
            bound.id(&format!("conv.{i}.b")),
        )?;
        x = tape.relu(conv);
    }
    let pooled = tape.max(x, Some(0))?;
    let weighted = tape.mul(pooled, bound.id("head_w"))?;
    let score = tape.sum(weighted, None)?;
    Ok(tape.add(score, bound.id("head_b"))?)
}

/// A CNN spec plus its parameters.
pub struct CnnModel<F: Scalar> {
    pub spec: CnnSpec,
    pub params: ParamSet<F>,
}

impl<F: Scalar> CnnModel<F> {
    pub fn init(spec: CnnSpec, seed: u64) -> Result<CnnModel<F>, ModelError> {
        spec.validate()?;
        let params = init_cnn_params(&spec, seed);
        Ok(CnnModel { spec, params })
    }

    pub fn from_parts(spec: CnnSpec, params: ParamSet<F>) -> Result<CnnModel<F>, ModelError> {
        spec.validate()?;
        let expected = cnn_param_layout(&spec);
        let got = params.layout();
        if expected != got {
            let detail = expected
                .iter()
                .zip(got.iter())
                .find(|(e, g)| e != g)
                .map(|(e, g)| format!("expected {:?} {:?}, found {:?} {:?}", e.0, e.1, g.0, g.1))
                .unwrap_or_else(|| {
                    format!("expected {} tensors, found {}", expected.len(), got.len())
                });
            return Err(ModelError::ParamMismatch(detail));
        }
        Ok(CnnModel { spec, params })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        tokens: &TokenSequence,
    ) -> Result<TensorId, ModelError> {
        forward_cnn(tape, bound, &self.spec, tokens)
    }
}
