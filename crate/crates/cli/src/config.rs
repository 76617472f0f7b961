//! Run configuration: a JSON document mirroring the model and training
//! hyperparameters plus data paths. Unknown keys are rejected outright —
//! a silently ignored typo is worse than an error. The resolved form is
//! echoed into the run directory and can be fed back via `--config` to
//! reproduce a run.

use crate::error::CliError;
use seqfn_core::arch::{self, ArchSpec};
use seqfn_core::cnn::CnnSpec;
use seqfn_core::model::{HeadKind, ModelSpec, DEFAULT_SCAN};
use seqfn_core::scan;
use seqfn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// User-facing config: every field optional, defaults documented in the
/// README. Field names match the resolved echo, so an echoed config loads
/// back without edits.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Option<String>,
    pub arch: Option<String>,
    pub scan: Option<String>,
    pub vocab_size: Option<usize>,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub d_state: Option<usize>,
    pub expand: Option<usize>,
    pub conv_kernel: Option<usize>,
    pub cnn_embed_dim: Option<usize>,
    pub cnn_filters: Option<Vec<usize>>,
    pub cnn_kernels: Option<Vec<usize>>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub max_epochs: Option<u32>,
    pub patience: Option<u32>,
    pub max_tokens: Option<usize>,
    pub eval_every: Option<u32>,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: Option<u64>,
    pub corpus: Option<String>,
    pub data: Option<String>,
    pub checkpoint: Option<String>,
    pub task: Option<String>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }
}

/// Which command is resolving (pretraining and fine-tuning default to
/// different epoch budgets).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Pretrain,
    Finetune,
}

/// Fully concrete configuration; serialized into the run directory.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub mode: String,
    pub arch: String,
    pub scan: String,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub cnn_embed_dim: usize,
    pub cnn_filters: Vec<usize>,
    pub cnn_kernels: Vec<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: u32,
    pub patience: u32,
    pub max_tokens: usize,
    pub eval_every: u32,
    pub grad_clip: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

/// Fill every unset field with its default. `mode` comes from the
/// environment first, then the config, then "reference".
pub fn resolve(cfg: &RunConfig, cmd: CommandKind) -> Result<ResolvedConfig, CliError> {
    let mamba_defaults = ModelSpec::default();
    let cnn_defaults = CnnSpec::default();
    let train_defaults = match cmd {
        CommandKind::Pretrain => TrainConfig::pretrain_defaults(),
        CommandKind::Finetune => TrainConfig::finetune_defaults(),
    };

    let mode = match std::env::var(seqfn_core::MODE_ENV) {
        Ok(v) => {
            seqfn_core::Mode::parse(&v).ok_or_else(|| {
                CliError::usage(format!(
                    "{} must be \"fast\" or \"reference\", got {v:?}",
                    seqfn_core::MODE_ENV
                ))
            })?;
            v
        }
        Err(_) => {
            let m = cfg.mode.clone().unwrap_or_else(|| "reference".into());
            seqfn_core::Mode::parse(&m)
                .ok_or_else(|| CliError::usage(format!("mode must be \"fast\" or \"reference\", got {m:?}")))?;
            m
        }
    };

    let arch = cfg.arch.clone().unwrap_or_else(|| "mamba".into());
    if !arch::is_registered(&arch) {
        return Err(CliError::usage(format!(
            "unknown arch {arch:?}; registered: {}",
            arch::arch_names().join(", ")
        )));
    }
    let scan_name = cfg.scan.clone().unwrap_or_else(|| DEFAULT_SCAN.into());
    if scan::kernel_by_name::<f64>(&scan_name).is_none() {
        return Err(CliError::usage(format!(
            "unknown scan kernel {scan_name:?}; registered: {}",
            scan::kernel_names().join(", ")
        )));
    }
    if let Some(task) = &cfg.task {
        parse_task(task)?;
    }

    Ok(ResolvedConfig {
        mode,
        arch,
        scan: scan_name,
        vocab_size: cfg.vocab_size.unwrap_or(mamba_defaults.vocab_size),
        d_model: cfg.d_model.unwrap_or(mamba_defaults.d_model),
        n_layers: cfg.n_layers.unwrap_or(mamba_defaults.n_layers),
        d_state: cfg.d_state.unwrap_or(mamba_defaults.d_state),
        expand: cfg.expand.unwrap_or(mamba_defaults.expand),
        conv_kernel: cfg.conv_kernel.unwrap_or(mamba_defaults.conv_kernel),
        cnn_embed_dim: cfg.cnn_embed_dim.unwrap_or(cnn_defaults.embed_dim),
        cnn_filters: cfg.cnn_filters.clone().unwrap_or(cnn_defaults.filters),
        cnn_kernels: cfg.cnn_kernels.clone().unwrap_or(cnn_defaults.kernels),
        lr: cfg.lr.unwrap_or(train_defaults.lr),
        beta1: cfg.beta1.unwrap_or(train_defaults.beta1),
        beta2: cfg.beta2.unwrap_or(train_defaults.beta2),
        eps: cfg.eps.unwrap_or(train_defaults.eps),
        max_epochs: cfg.max_epochs.unwrap_or(train_defaults.max_epochs),
        patience: cfg.patience.unwrap_or(train_defaults.patience),
        max_tokens: cfg.max_tokens.unwrap_or(train_defaults.max_tokens),
        eval_every: cfg.eval_every.unwrap_or(train_defaults.eval_every),
        grad_clip: cfg.grad_clip.unwrap_or(1.0),
        seed: cfg.seed.unwrap_or(0),
        corpus: cfg.corpus.clone(),
        data: cfg.data.clone(),
        checkpoint: cfg.checkpoint.clone(),
        task: cfg.task.clone(),
    })
}

pub fn parse_task(task: &str) -> Result<HeadKind, CliError> {
    match task {
        "regression" => Ok(HeadKind::Regression),
        "classification" => Ok(HeadKind::BinaryClassification),
        other => Err(CliError::usage(format!(
            "task must be \"regression\" or \"classification\", got {other:?}"
        ))),
    }
}

impl ResolvedConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            max_tokens: self.max_tokens,
            seed: self.seed,
            eval_every: self.eval_every,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: if self.grad_clip == 0.0 {
                None
            } else {
                Some(self.grad_clip)
            },
        }
    }

    pub fn mamba_spec(&self, head: HeadKind) -> ModelSpec {
        ModelSpec {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            d_state: self.d_state,
            expand: self.expand,
            conv_kernel: self.conv_kernel,
            head,
        }
    }

    pub fn arch_spec(&self, head: HeadKind) -> ArchSpec {
        match self.arch.as_str() {
            "cnn" => ArchSpec::Cnn(CnnSpec {
                vocab_size: self.vocab_size,
                embed_dim: self.cnn_embed_dim,
                filters: self.cnn_filters.clone(),
                kernels: self.cnn_kernels.clone(),
                head,
            }),
            _ => ArchSpec::Mamba(self.mamba_spec(head)),
        }
    }

    /// Serialize for the run-directory echo; key order is fixed by the
    /// struct, so reruns produce identical bytes.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
