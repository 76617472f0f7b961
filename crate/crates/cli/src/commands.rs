//! Subcommand implementations. Training commands resolve their config
//! first and then dispatch to the 64-bit (reference) or 32-bit (fast)
//! engine; outputs that land in the run directory are byte-reproducible
//! for a fixed seed and config in reference mode.

use crate::config::{parse_task, resolve, CommandKind, ResolvedConfig, RunConfig};
use crate::error::CliError;
use clap::Args;
use seqfn_core::arch::{build_model, model_from_params, SequenceModel};
use seqfn_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use seqfn_core::data::{
    encode, load_labeled_csv, parse_fasta, require_binary_labels, write_fasta, FastaRecord,
    FreqReport, LabeledExample, Split, CANONICAL, RESIDUE_NAMES,
};
use seqfn_core::metrics::{EvalReport, SplitMetric};
use seqfn_core::model::{HeadKind, DEFAULT_SCAN};
use seqfn_core::pdb::parse_pdb;
use seqfn_core::train::{
    evaluate_split, finetune, predict_scores, prepare_finetune_model, pretrain, EpochLog,
    TrainOutcome,
};
use seqfn_core::{Mode, Scalar};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

fn must_exist(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::usage(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn read_to_string(path: &Path, what: &str) -> Result<String, CliError> {
    must_exist(path, what)?;
    fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => {
            must_exist(p, "config")?;
            RunConfig::from_path(p)
        }
        None => Ok(RunConfig::default()),
    }
}

fn mode_of(resolved: &ResolvedConfig) -> Mode {
    Mode::parse(&resolved.mode).expect("mode validated at resolve time")
}

fn write_run_files(out_dir: &Path, resolved: &ResolvedConfig) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut echo = resolved.to_json_pretty();
    echo.push('\n');
    fs::write(out_dir.join("config.json"), echo)
        .map_err(|e| CliError::data(format!("cannot write config echo: {e}")))?;
    Ok(())
}

/// jsonl training log; timing stays on stderr only.
struct EpochWriter {
    file: fs::File,
}

impl EpochWriter {
    fn create(out_dir: &Path) -> Result<EpochWriter, CliError> {
        let file = fs::File::create(out_dir.join("train_log.jsonl"))
            .map_err(|e| CliError::data(format!("cannot create train log: {e}")))?;
        Ok(EpochWriter { file })
    }

    fn write(&mut self, log: &EpochLog) {
        let line = serde_json::to_string(log).expect("epoch log serializes");
        writeln!(self.file, "{line}").expect("train log writable");
        let valid = log
            .valid_loss
            .map(|v| format!("  valid {v:.4}"))
            .or_else(|| log.valid_metric.map(|v| format!("  metric {v:.4}")))
            .unwrap_or_default();
        eprintln!(
            "epoch {:4}  train {:.4}{valid}  ({:.0} tok/s)",
            log.epoch, log.train_loss, log.tokens_per_sec
        );
    }
}

// ── ingest ───────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of .pdb files to extract SEQRES chains from
    #[arg(long)]
    pub pdb_dir: Option<PathBuf>,
    /// Existing FASTA file to normalize instead of PDB input
    #[arg(long)]
    pub fasta: Option<PathBuf>,
    /// Output corpus FASTA path
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only PDB files containing exactly one chain
    #[arg(long)]
    pub single_chain_only: bool,
}

pub fn cmd_ingest(args: &IngestArgs) -> Result<(), CliError> {
    let mut records: Vec<FastaRecord> = Vec::new();
    let mut unreadable: Vec<String> = Vec::new();

    match (&args.pdb_dir, &args.fasta) {
        (Some(dir), None) => {
            must_exist(dir, "--pdb-dir")?;
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| CliError::usage(format!("cannot list {}: {e}", dir.display())))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .map(|ext| ext.eq_ignore_ascii_case("pdb"))
                        .unwrap_or(false)
                })
                .collect();
            paths.sort();
            for path in paths {
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| "unnamed".into());
                let bytes = match fs::read(&path) {
                    Ok(b) => b,
                    Err(e) => {
                        unreadable.push(format!("{}: {e}", path.display()));
                        continue;
                    }
                };
                let parsed = parse_pdb(&bytes);
                for w in &parsed.warnings {
                    eprintln!("{}: {w}", path.display());
                }
                if args.single_chain_only && parsed.chains.len() != 1 {
                    continue;
                }
                for chain in &parsed.chains {
                    if chain.sequence.is_empty() {
                        continue;
                    }
                    records.push(FastaRecord {
                        header: format!("{stem}_{}", chain.chain_id),
                        sequence: chain.sequence.clone(),
                    });
                }
            }
        }
        (None, Some(fasta)) => {
            let text = read_to_string(fasta, "--fasta")?;
            for mut rec in parse_fasta(&text)? {
                rec.sequence = rec.sequence.to_ascii_uppercase();
                records.push(rec);
            }
        }
        _ => {
            return Err(CliError::usage(
                "exactly one of --pdb-dir or --fasta is required",
            ))
        }
    }

    for line in &unreadable {
        eprintln!("unreadable: {line}");
    }
    if records.is_empty() {
        return Err(CliError::data("ingest produced zero sequences"));
    }
    fs::write(&args.out, write_fasta(&records))
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", args.out.display())))?;

    let report = FreqReport::from_sequences(records.iter().map(|r| r.sequence.as_str()));
    println!(
        "sequences: {}   residues: {}   (written to {})",
        records.len(),
        report.total_with_x(),
        args.out.display()
    );
    println!("{}", frequency_table(&report));
    Ok(())
}

/// Residue frequency table: full name, one-letter code, percentage over
/// canonical residues and with X in the denominator.
pub fn frequency_table(report: &FreqReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:<6} {:>12} {:>12}\n",
        "class", "code", "% canonical", "% incl. X"
    ));
    for (i, &code) in CANONICAL.iter().enumerate() {
        out.push_str(&format!(
            "{:<16} {:<6} {:>12.2} {:>12.2}\n",
            RESIDUE_NAMES[i],
            code,
            report.percent_canonical(code),
            report.percent_with_x(code)
        ));
    }
    let x_pct = if report.total_with_x() == 0 {
        0.0
    } else {
        100.0 * report.x_count as f64 / report.total_with_x() as f64
    };
    out.push_str(&format!(
        "{:<16} {:<6} {:>12} {:>12.2}\n",
        "nonstandard", "X", "-", x_pct
    ));
    out
}

// ── pretrain ─────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// JSON run config (defaults apply when omitted)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus FASTA of unlabeled sequences
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Run directory for config echo, log, and checkpoint
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Override the config seed
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<(), CliError> {
    let mut rc = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        rc.seed = Some(seed);
    }
    if let Some(corpus) = &args.corpus {
        rc.corpus = Some(corpus.display().to_string());
    }
    let resolved = resolve(&rc, CommandKind::Pretrain)?;
    match mode_of(&resolved) {
        Mode::Reference => run_pretrain::<f64>(args, &resolved),
        Mode::Fast => run_pretrain::<f32>(args, &resolved),
    }
}

fn run_pretrain<F: Scalar>(args: &PretrainArgs, resolved: &ResolvedConfig) -> Result<(), CliError> {
    let corpus_path = resolved
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::usage("missing corpus path (--corpus or config \"corpus\")"))?;
    let text = read_to_string(Path::new(corpus_path), "corpus")?;
    let corpus: Vec<String> = parse_fasta(&text)?
        .into_iter()
        .map(|r| r.sequence)
        .collect();

    write_run_files(&args.out_dir, resolved)?;
    let mut log = EpochWriter::create(&args.out_dir)?;
    let spec = resolved.mamba_spec(HeadKind::Lm);
    let outcome: TrainOutcome<F> = pretrain(
        &corpus,
        &spec,
        &resolved.train_config(),
        &resolved.scan,
        &mut |l| log.write(l),
    )?;
    finish_training_run(&args.out_dir, &outcome, "pretrain")
}

fn finish_training_run<F: Scalar>(
    out_dir: &Path,
    outcome: &TrainOutcome<F>,
    what: &str,
) -> Result<(), CliError> {
    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &outcome.checkpoint)?;
    if outcome.skipped_sequences > 0 {
        eprintln!(
            "warning: {} sequences exceeded the token budget and were skipped",
            outcome.skipped_sequences
        );
    }
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{what}: epochs {}  best epoch {}  best metric {}  checkpoint {}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome
            .best_metric
            .map(|m| format!("{m:.6}"))
            .unwrap_or_else(|| "n/a".into()),
        ckpt_path.display()
    );
    if let Some(reason) = &outcome.divergence {
        return Err(CliError::numeric(format!(
            "{what} diverged ({reason}); last good checkpoint retained at {}",
            ckpt_path.display()
        )));
    }
    Ok(())
}

// ── finetune ─────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// JSON run config (defaults apply when omitted)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pretrained checkpoint to start from; omit to train from scratch
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labeled CSV (sequence,label,split)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Task kind: regression or classification
    #[arg(long)]
    pub task: Option<String>,
    /// Run directory
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Override the config seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seed list; runs once per seed and reports mean(std)
    #[arg(long)]
    pub seeds: Option<String>,
    /// Architecture for from-scratch training (mamba or cnn)
    #[arg(long)]
    pub arch: Option<String>,
}

pub fn cmd_finetune(args: &FinetuneArgs) -> Result<(), CliError> {
    let mut rc = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        rc.seed = Some(seed);
    }
    if let Some(data) = &args.data {
        rc.data = Some(data.display().to_string());
    }
    if let Some(task) = &args.task {
        rc.task = Some(task.clone());
    }
    if let Some(arch) = &args.arch {
        rc.arch = Some(arch.clone());
    }
    if let Some(ckpt) = &args.checkpoint {
        rc.checkpoint = Some(ckpt.display().to_string());
    }
    let explicit_model_shape = rc.vocab_size.is_some()
        || rc.d_model.is_some()
        || rc.n_layers.is_some()
        || rc.d_state.is_some()
        || rc.expand.is_some()
        || rc.conv_kernel.is_some()
        || rc.cnn_embed_dim.is_some()
        || rc.cnn_filters.is_some()
        || rc.cnn_kernels.is_some()
        || args.arch.is_some()
        || rc.arch.is_some();
    let resolved = resolve(&rc, CommandKind::Finetune)?;
    match mode_of(&resolved) {
        Mode::Reference => run_finetune::<f64>(args, &resolved, explicit_model_shape),
        Mode::Fast => run_finetune::<f32>(args, &resolved, explicit_model_shape),
    }
}

fn parse_seeds(list: &str) -> Result<Vec<u64>, CliError> {
    let mut out = Vec::new();
    for part in list.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<u64>()
                .map_err(|_| CliError::usage(format!("bad seed {part:?} in --seeds")))?,
        );
    }
    if out.is_empty() {
        return Err(CliError::usage("--seeds must list at least one seed"));
    }
    Ok(out)
}

fn run_finetune<F: Scalar>(
    args: &FinetuneArgs,
    resolved: &ResolvedConfig,
    explicit_model_shape: bool,
) -> Result<(), CliError> {
    let task = resolved
        .task
        .as_ref()
        .ok_or_else(|| CliError::usage("missing --task (regression or classification)"))?;
    let head = parse_task(task)?;
    let data_path = resolved
        .data
        .as_ref()
        .ok_or_else(|| CliError::usage("missing labeled data (--data or config \"data\")"))?;
    let text = read_to_string(Path::new(data_path), "data")?;
    let examples = load_labeled_csv(&text)?;
    if head == HeadKind::BinaryClassification {
        require_binary_labels(&examples)?;
    }

    let seeds = match &args.seeds {
        Some(list) => parse_seeds(list)?,
        None => vec![resolved.seed],
    };
    let multi = seeds.len() > 1;
    let mut metric_values: Vec<f64> = Vec::new();
    let mut metric_name = head.metric_name().to_string();

    for &seed in &seeds {
        let run_dir = if multi {
            args.out_dir.join(format!("seed_{seed}"))
        } else {
            args.out_dir.clone()
        };
        let mut seed_cfg = resolved.clone();
        seed_cfg.seed = seed;
        let report =
            run_single_finetune::<F>(&seed_cfg, head, &examples, &run_dir, explicit_model_shape)?;
        metric_name = report.metric.clone();
        metric_values.push(report.value);
    }

    if multi {
        let n = metric_values.len() as f64;
        let mean = metric_values.iter().sum::<f64>() / n;
        let std = if metric_values.len() > 1 {
            (metric_values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let summary = serde_json::json!({
            "metric": metric_name,
            "seeds": seeds,
            "values": metric_values,
            "mean": mean,
            "std": std,
        });
        fs::write(
            args.out_dir.join("summary.json"),
            format!("{}\n", serde_json::to_string_pretty(&summary).unwrap()),
        )
        .map_err(|e| CliError::data(format!("cannot write summary: {e}")))?;
        println!("{metric_name} mean(std): {mean:.3}({std:.3})");
    }
    Ok(())
}

fn run_single_finetune<F: Scalar>(
    resolved: &ResolvedConfig,
    head: HeadKind,
    examples: &[LabeledExample],
    run_dir: &Path,
    explicit_model_shape: bool,
) -> Result<EvalReport, CliError> {
    write_run_files(run_dir, resolved)?;
    let mut log = EpochWriter::create(run_dir)?;

    let model: Box<dyn SequenceModel<F>> = match &resolved.checkpoint {
        Some(ckpt_path) => {
            must_exist(Path::new(ckpt_path), "checkpoint")?;
            let ckpt: Checkpoint<F> = load_checkpoint(ckpt_path)?;
            let expected = explicit_model_shape.then(|| resolved.arch_spec(head));
            prepare_finetune_model(ckpt, head, expected.as_ref(), resolved.seed, &resolved.scan)?
        }
        None => build_model(&resolved.arch_spec(head), resolved.seed, &resolved.scan)?,
    };

    let mut cfg = resolved.train_config();
    cfg.seed = resolved.seed;
    let outcome = finetune(model, examples, &cfg, &mut |l| log.write(l))?;
    finish_training_run(run_dir, &outcome, "finetune")?;

    // evaluate the returned (best-on-valid) model
    let best = model_from_params(
        &outcome.checkpoint.spec,
        outcome.checkpoint.params.clone(),
        &resolved.scan,
    )?;
    let report = build_report(
        best.as_ref(),
        examples,
        Split::Valid,
        Path::new(resolved.data.as_deref().unwrap_or("dataset")),
    )?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    fs::write(run_dir.join("eval_valid.json"), &json)
        .map_err(|e| CliError::data(format!("cannot write eval report: {e}")))?;
    eprint!("{}", report.render_table());
    Ok(report)
}

fn build_report<F: Scalar>(
    model: &dyn SequenceModel<F>,
    examples: &[LabeledExample],
    split: Split,
    data_path: &Path,
) -> Result<EvalReport, CliError> {
    let (value, n) = evaluate_split(model, examples, split)?;
    let task = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "dataset".into());
    let mut splits = BTreeMap::new();
    splits.insert(
        split.name().to_string(),
        SplitMetric {
            value,
            n_examples: n,
        },
    );
    Ok(EvalReport {
        task,
        metric: model.head().metric_name().to_string(),
        value,
        n_examples: n,
        splits,
    })
}

// ── evaluate ─────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled CSV (sequence,label,split)
    #[arg(long)]
    pub data: PathBuf,
    /// Split to evaluate
    #[arg(long, default_value = "test")]
    pub split: String,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    match Mode::from_env().map_err(CliError::usage)? {
        Mode::Reference => run_evaluate::<f64>(args),
        Mode::Fast => run_evaluate::<f32>(args),
    }
}

fn run_evaluate<F: Scalar>(args: &EvaluateArgs) -> Result<(), CliError> {
    let split = Split::parse(&args.split)
        .ok_or_else(|| CliError::usage(format!("split must be train/valid/test, got {:?}", args.split)))?;
    must_exist(&args.checkpoint, "checkpoint")?;
    let ckpt: Checkpoint<F> = load_checkpoint(&args.checkpoint)?;
    if !ckpt.spec.head().is_task() {
        return Err(CliError::usage(
            "checkpoint holds a language-model head; fine-tune it before evaluating",
        ));
    }
    let model = model_from_params(&ckpt.spec, ckpt.params, DEFAULT_SCAN)?;
    let text = read_to_string(&args.data, "data")?;
    let examples = load_labeled_csv(&text)?;
    let report = build_report(model.as_ref(), examples.as_slice(), split, &args.data)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    eprint!("{}", report.render_table());
    Ok(())
}

// ── predict ──────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint to score with
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// FASTA of sequences to score
    #[arg(long)]
    pub fasta: PathBuf,
}

pub fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    match Mode::from_env().map_err(CliError::usage)? {
        Mode::Reference => run_predict::<f64>(args),
        Mode::Fast => run_predict::<f32>(args),
    }
}

fn run_predict<F: Scalar>(args: &PredictArgs) -> Result<(), CliError> {
    must_exist(&args.checkpoint, "checkpoint")?;
    let ckpt: Checkpoint<F> = load_checkpoint(&args.checkpoint)?;
    if !ckpt.spec.head().is_task() {
        return Err(CliError::usage(
            "checkpoint holds a language-model head; fine-tune it before predicting",
        ));
    }
    let model = model_from_params(&ckpt.spec, ckpt.params, DEFAULT_SCAN)?;
    let text = read_to_string(&args.fasta, "fasta")?;
    let records = parse_fasta(&text)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for rec in &records {
        let tokens = encode(&rec.sequence)
            .map_err(|e| CliError::data(format!("record {:?}: {e}", rec.id())))?;
        let score = predict_scores(model.as_ref(), &[tokens])?[0];
        writeln!(out, "{}\t{score:.6}", rec.id())
            .map_err(|e| CliError::data(format!("cannot write prediction: {e}")))?;
    }
    Ok(())
}
