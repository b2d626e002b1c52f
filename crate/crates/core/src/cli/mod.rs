//! Command line front end: `train`, `eval`, `predict`, `gradcheck` and
//! `convert`.

pub mod config;
pub mod gradcheck;
pub mod metrics;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::classifier::TsaModel;
use crate::data::convert::{convert, DatasetKind, SstGranularity};
use crate::data::{
    batch_embedded, embed_examples, format_tsv, read_tsv, tokenize, Batch, EmbeddedExample, Example, LabelMap,
};
use crate::embeddings::{load_contextual, load_static_table, Embedder};
use crate::error::{Result, TsaError};
use crate::numerics::{AdamState, Fault, Mode, Rng, Tape, Tensor};

pub use config::{EmbeddingSource, RunConfig};
pub use gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
pub use metrics::{ClassMetrics, MetricsReport};

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Parser, Debug)]
#[command(name = "tsa", version, about = "Transformer sentiment analysis")]
pub struct Cli {
    /// Run configuration file (flat key=value).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints and logs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and keep the best-dev checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled TSV file.
    Eval(EvalArgs),
    /// Classify one text.
    Predict(PredictArgs),
    /// Finite-difference check of all gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Convert a public dataset distribution to canonical TSV.
    Convert(ConvertArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled TSV file.
    #[arg(long)]
    pub data: PathBuf,
    /// Contextual vectors for `data`, required for contextual models.
    #[arg(long)]
    pub contextual: Option<PathBuf>,
    /// Split name used in the report.
    #[arg(long, default_value = "eval")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub text: String,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// SST label granularity: `binary` or `fine`.
    #[arg(long, default_value = "binary")]
    pub granularity: String,
}

/// Parses arguments and runs one command, returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            write!(out, "{e}").map_err(stdout_err)?;
            return Ok(0);
        }
        Err(e) => {
            let msg = e.to_string();
            let msg = msg.trim_end().strip_prefix("error: ").unwrap_or(msg.trim_end());
            return Err(TsaError::Usage(msg.to_string()));
        }
    };
    match &cli.command {
        Command::Train(a) => cmd_train(&cli, a, out).map(|_| 0),
        Command::Eval(a) => cmd_eval(a, out).map(|_| 0),
        Command::Predict(a) => cmd_predict(a, out).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(&cli, a, out),
        Command::Convert(a) => cmd_convert(a, out).map(|_| 0),
    }
}

fn stdout_err(e: std::io::Error) -> TsaError {
    TsaError::io("<stdout>", e)
}

fn load_run_config(cli: &Cli, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| TsaError::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the embedder for one split.
pub fn split_embedder(cfg: &RunConfig, contextual_path: Option<&Path>) -> Result<Embedder> {
    Ok(match cfg.embedding_source {
        EmbeddingSource::Hash => Embedder::Hash {
            dim: cfg.embedding_dim,
            seed: cfg.embedding_seed,
        },
        EmbeddingSource::Static => {
            let p = cfg
                .static_path
                .as_deref()
                .ok_or_else(|| TsaError::Config("static_path is not set".into()))?;
            Embedder::Static(load_static_table(p)?)
        }
        EmbeddingSource::Contextual => {
            let p = contextual_path.ok_or_else(|| TsaError::Config("contextual vectors path is not set".into()))?;
            Embedder::Contextual {
                store: load_contextual(p)?,
                mode: cfg.layer_mode,
            }
        }
    })
}

fn num_workers() -> usize {
    std::env::var("TSA_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Eval-mode argmax predictions for every example, in input order. Batches
/// are spread over `TSA_NUM_WORKERS` threads.
pub fn predict_labels(model: &TsaModel, batches: &[Batch]) -> Result<Vec<(usize, usize)>> {
    let workers = num_workers().min(batches.len()).max(1);
    let chunk = batches.len().div_ceil(workers).max(1);
    let per_chunk: Vec<Result<Vec<(usize, usize)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = batches
            .chunks(chunk)
            .map(|group| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for b in group {
                        for (row, p) in model.predict(b)?.into_iter().enumerate() {
                            out.push((b.indices[row], p.label));
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut all = Vec::new();
    for r in per_chunk {
        all.extend(r?);
    }
    all.sort_by_key(|&(i, _)| i);
    Ok(all)
}

/// Scores `model` on embedded, labelled examples.
pub fn evaluate(model: &TsaModel, examples: &[EmbeddedExample], batch_size: usize) -> Result<MetricsReport> {
    let start = Instant::now();
    if examples.is_empty() {
        return Err(TsaError::Data("no examples to evaluate".into()));
    }
    let batches = batch_embedded(examples, batch_size, None, false)?;
    let preds = predict_labels(model, &batches)?;
    let gold: Vec<usize> = examples
        .iter()
        .map(|e| e.label.ok_or_else(|| TsaError::Data("unlabelled example in evaluation".into())))
        .collect::<Result<_>>()?;
    let predicted: Vec<usize> = preds.into_iter().map(|(_, l)| l).collect();
    Ok(MetricsReport::compute(&gold, &predicted, &model.labels, start.elapsed().as_secs_f64()))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
}

pub struct TrainOutcome {
    /// Model restored to the best-dev epoch.
    pub model: TsaModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
}

/// Trains on embedded splits. Each epoch appends one JSON line to `log`.
/// The returned model carries the parameters of the best dev epoch; ties
/// keep the earlier epoch.
pub fn train_embedded(
    cfg: &RunConfig,
    labels: LabelMap,
    input_layers: Option<usize>,
    train: &[EmbeddedExample],
    dev: &[EmbeddedExample],
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    let input_dim = train
        .first()
        .map(|e| *e.input.shape().last().expect("rank ≥ 2"))
        .ok_or_else(|| TsaError::Data("training split is empty".into()))?;
    if dev.is_empty() {
        return Err(TsaError::Data("dev split is empty".into()));
    }
    let model_cfg = cfg.model_config(input_dim, input_layers, labels.num_classes());
    let mut model = TsaModel::new(model_cfg, labels, cfg.seed)?;
    let mut adam = AdamState::new(&model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps).with_warmup(cfg.warmup_steps);
    let mut dropout_rng = Rng::derive(cfg.seed, 2);

    let mut records = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let batches = batch_embedded(
            train,
            cfg.batch_size,
            Some(cfg.seed.wrapping_add(epoch as u64)),
            cfg.length_bucketing,
        )?;
        let mut total = 0.0;
        for batch in &batches {
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, batch, Mode::Train, &mut dropout_rng)?;
            total += tape.value(loss).item() * batch.size() as f64;
            model.params.zero_grad();
            tape.backward_into(loss, &mut model.params)?;
            if cfg.clip_norm > 0.0 {
                model.params.clip_grad_norm(cfg.clip_norm);
            }
            adam.step(&mut model.params)?;
        }
        let dev_accuracy = evaluate(&model, dev, cfg.batch_size)?.accuracy;
        let train_accuracy = if cfg.eval_train {
            Some(evaluate(&model, train, cfg.batch_size)?.accuracy)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            dev_accuracy,
            train_accuracy,
        };
        writeln!(log, "{}", serde_json::to_string(&record).expect("record serialises")).map_err(stdout_err)?;
        records.push(record);

        if best.as_ref().is_none_or(|(_, acc, _)| dev_accuracy > *acc) {
            let snapshot = model.params.iter().map(|(_, p)| p.value.clone()).collect();
            best = Some((epoch, dev_accuracy, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }

    let (best_epoch, best_dev_accuracy) = match best {
        Some((epoch, acc, snapshot)) => {
            for (p, v) in model.params.iter_mut().zip(snapshot) {
                p.value = v;
            }
            (epoch, acc)
        }
        None => (0, evaluate(&model, dev, cfg.batch_size)?.accuracy),
    };
    Ok(TrainOutcome {
        model,
        log: records,
        best_epoch,
        best_dev_accuracy,
    })
}

struct PreparedData {
    labels: LabelMap,
    input_layers: Option<usize>,
    train: Vec<EmbeddedExample>,
    dev: Vec<EmbeddedExample>,
}

fn prepare(cfg: &RunConfig) -> Result<PreparedData> {
    let train_path = cfg
        .train_path
        .as_deref()
        .ok_or_else(|| TsaError::Config("train_path is not set".into()))?;
    let dev_path = cfg
        .dev_path
        .as_deref()
        .ok_or_else(|| TsaError::Config("dev_path is not set".into()))?;
    let train_ex = read_tsv(train_path, cfg.schema, cfg.lowercase)?;
    let dev_ex = read_tsv(dev_path, cfg.schema, cfg.lowercase)?;
    if train_ex.is_empty() {
        return Err(TsaError::Data(format!("{} has no examples", train_path.display())));
    }
    if dev_ex.is_empty() {
        return Err(TsaError::Data(format!("{} has no examples", dev_path.display())));
    }
    let labels = LabelMap::from_examples(&train_ex)?;
    let train_emb = split_embedder(cfg, cfg.contextual_train_path.as_deref())?;
    let dev_emb = match cfg.embedding_source {
        EmbeddingSource::Contextual => split_embedder(cfg, cfg.contextual_dev_path.as_deref())?,
        _ => train_emb.clone(),
    };
    let train = embed_examples(&train_ex, &train_emb, Some(&labels))?;
    let dev = embed_examples(&dev_ex, &dev_emb, Some(&labels))?;
    Ok(PreparedData {
        labels,
        input_layers: train_emb.layers(),
        train,
        dev,
    })
}

fn print_report(out: &mut dyn Write, split: &str, report: &MetricsReport) -> Result<()> {
    writeln!(out, "== {split} ==").map_err(stdout_err)?;
    write!(out, "{}", report.table()).map_err(stdout_err)?;
    let mut value = serde_json::to_value(report).expect("metrics serialise");
    value["split"] = serde_json::Value::String(split.to_string());
    writeln!(out, "{value}").map_err(stdout_err)
}

fn cmd_train(cli: &Cli, args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_run_config(cli, &args.set)?;
    let data = prepare(&cfg)?;
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("tsa-out"));
    std::fs::create_dir_all(&out_dir).map_err(|e| TsaError::io(&out_dir, e))?;
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let mut log = std::fs::File::create(&log_path).map_err(|e| TsaError::io(&log_path, e))?;

    let outcome = train_embedded(&cfg, data.labels, data.input_layers, &data.train, &data.dev, &mut log)?;
    let mut extra = cfg.embedding_metadata();
    extra.insert("seed".into(), cfg.seed.to_string());
    extra.insert("best_epoch".into(), outcome.best_epoch.to_string());
    outcome.model.save(&out_dir, &extra)?;

    writeln!(
        out,
        "best epoch {} dev accuracy {:.4}; checkpoint in {}",
        outcome.best_epoch,
        outcome.best_dev_accuracy,
        out_dir.display()
    )
    .map_err(stdout_err)?;
    print_report(out, "train", &evaluate(&outcome.model, &data.train, cfg.batch_size)?)?;
    print_report(out, "dev", &evaluate(&outcome.model, &data.dev, cfg.batch_size)?)
}

fn load_model(dir: &Path) -> Result<(TsaModel, RunConfig, BTreeMap<String, String>)> {
    let (model, extra) = TsaModel::load(dir)?;
    let embedding_keys: BTreeMap<String, String> = extra
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "seed" | "best_epoch"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let cfg = RunConfig::from_embedding_metadata(&embedding_keys)?;
    Ok((model, cfg, extra))
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (model, cfg, _) = load_model(&args.model)?;
    let examples = read_tsv(&args.data, cfg.schema, cfg.lowercase)?;
    if examples.is_empty() {
        return Err(TsaError::Data(format!("{} has no examples", args.data.display())));
    }
    let embedder = split_embedder(&cfg, args.contextual.as_deref())?;
    let embedded = embed_examples(&examples, &embedder, Some(&model.labels))?;
    let report = evaluate(&model, &embedded, cfg.batch_size)?;
    print_report(out, &args.split, &report)
}

fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let (model, cfg, _) = load_model(&args.model)?;
    let tokens = tokenize(&args.text, cfg.lowercase);
    if tokens.is_empty() {
        return Err(TsaError::Usage("predict needs non-empty --text".into()));
    }
    if cfg.embedding_source == EmbeddingSource::Contextual {
        return Err(TsaError::Usage(
            "predict on raw text is unavailable for contextual models; use eval with precomputed vectors".into(),
        ));
    }
    let embedder = split_embedder(&cfg, None)?;
    let example = Example {
        label: String::new(),
        text: args.text.clone(),
        tokens,
        line: 1,
    };
    let embedded = embed_examples(std::slice::from_ref(&example), &embedder, None)?;
    let batch = batch_embedded(&embedded, 1, None, false)?;
    let pred = model.predict(&batch[0])?.remove(0);
    let mut line = model.labels.label(pred.label).to_string();
    for p in &pred.probs {
        line.push_str(&format!("\t{p:.6}"));
    }
    writeln!(out, "{line}").map_err(stdout_err)
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let mut options = GradcheckOptions::default();
    if let Some(p) = &cli.config {
        let cfg = RunConfig::load(p)?;
        options.position = cfg.position_mode;
        options.pooling = cfg.pooling;
    }
    if let Some(seed) = cli.seed {
        options.seed = seed;
    }
    if args.inject_fault {
        options.fault = Some(Fault::TanhBackward);
    }
    let start = Instant::now();
    let report = run_gradcheck(&options)?;
    let width = report.groups.iter().map(|g| g.name.len()).max().unwrap_or(0);
    writeln!(out, "{:<width$}  {:>5}  {:>3}  {:<9}  status", "parameter", "n", "kink", "worst_rel").map_err(stdout_err)?;
    for g in &report.groups {
        writeln!(
            out,
            "{:<width$}  {:>5}  {:>3}  {:.3e}  {}",
            g.name,
            g.elements,
            g.kink_skipped,
            g.worst_rel_err,
            if g.passed() { "ok" } else { "FAIL" }
        )
        .map_err(stdout_err)?;
    }
    let secs = start.elapsed().as_secs_f64();
    if report.passed() {
        writeln!(out, "gradcheck passed: worst relative error {:.3e} ({secs:.1}s)", report.worst()).map_err(stdout_err)?;
        Ok(0)
    } else {
        writeln!(out, "gradcheck FAILED in: {}", report.failing().join(", ")).map_err(stdout_err)?;
        Ok(1)
    }
}

fn cmd_convert(args: &ConvertArgs, out: &mut dyn Write) -> Result<()> {
    let kind: DatasetKind = args.kind.parse()?;
    let granularity = match args.granularity.as_str() {
        "binary" => SstGranularity::Binary,
        "fine" => SstGranularity::Fine,
        other => return Err(TsaError::Usage(format!("unknown granularity {other:?}"))),
    };
    let content = std::fs::read_to_string(&args.input).map_err(|e| TsaError::io(&args.input, e))?;
    let examples = convert(kind, &content, granularity, &args.input.display().to_string())?;
    let text = format_tsv(&examples, crate::data::TsvSchema::LabelFirst);
    std::fs::write(&args.output, text).map_err(|e| TsaError::io(&args.output, e))?;
    writeln!(out, "{} examples written to {}", examples.len(), args.output.display()).map_err(stdout_err)
}
