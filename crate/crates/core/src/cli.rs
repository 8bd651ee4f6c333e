//! Command-line surface.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Preset, RunConfig};
use crate::dataset::{load_dataset, write_dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::geometry::{pairwise_bias, pairwise_buckets, BucketTable, PatchGrid};
use crate::inference::predict_all;
use crate::metrics::{answer_length_ratios, answer_length_stats, evaluate, ANLS_THRESHOLD};
use crate::model::{Model, ModelConfig, PositionMode};
use crate::synth::{synth_generate, SynthOptions};
use crate::tape::Tape;
use crate::tokenstream::SeparationStrategy;
use crate::training::{prepare_dataset, prepare_input, train_loop, LogEntry};
use crate::vocab::Vocab;

#[derive(Parser, Debug)]
#[command(name = "textvqa", version, about = "Scene-text VQA with spatial attention bias")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the token stream of one sample as JSON.
    Tokenize(TokenizeArgs),
    /// Print distance buckets and bias values (or attention maps) for one sample.
    Bias(BiasArgs),
    /// Generate a synthetic positional corpus.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score predictions or a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Answer-length statistics.
    Stats(StatsArgs),
    /// Write the built-in vocabulary file.
    Vocab(VocabArgs),
}

#[derive(Args, Debug)]
pub struct SampleSelect {
    /// Dataset file (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Sample id; defaults to the first record.
    #[arg(long)]
    pub id: Option<String>,
    /// Vocabulary file; defaults to the built-in vocabulary.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[command(flatten)]
    pub sample: SampleSelect,
    #[arg(long, value_enum, default_value = "tss")]
    pub strategy: SeparationStrategy,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BiasArgs {
    #[command(flatten)]
    pub sample: SampleSelect,
    /// Take the bucket table (and, with --attention, the whole model) from a checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dump per-layer, per-head encoder attention probabilities.
    #[arg(long)]
    pub attention: bool,
    #[arg(long, value_enum, default_value = "tss")]
    pub strategy: SeparationStrategy,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Question mix of a generated corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CorpusKind {
    /// Corner and relational questions, with letter-string distractors.
    Mixed,
    /// Closest-word questions about a highlighted sign.
    Proximity,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = CorpusKind::Mixed)]
    pub corpus: CorpusKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    /// Size of the fixed letter-string pool (0 draws fresh strings).
    #[arg(long, default_value_t = SynthOptions::default().pseudo_pool)]
    pub pseudo_pool: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration (TOML key-value file).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub position_mode: Option<PositionMode>,
    #[arg(long, value_enum)]
    pub strategy: Option<SeparationStrategy>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log (one JSON object per line).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// JSONL of `{"id": ..., "prediction": ...}`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Report unthresholded ANLS.
    #[arg(long)]
    pub raw_anls: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    prediction: String,
}

fn load_vocab(path: Option<&Path>) -> Result<Vocab> {
    match path {
        Some(p) => Vocab::load(p),
        None => Ok(Vocab::default_vocab()),
    }
}

fn select(records: &[SampleRecord], id: Option<&str>) -> Result<SampleRecord> {
    let found = match id {
        Some(id) => records.iter().find(|r| r.id == id),
        None => records.first(),
    };
    found
        .cloned()
        .ok_or_else(|| Error::InvalidInput(format!("sample `{}` not found", id.unwrap_or("<first>"))))
}

fn emit(out: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(())
}

fn load_predictions(path: &Path, records: &[SampleRecord]) -> Result<Vec<String>> {
    let mut by_id = std::collections::HashMap::new();
    for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        by_id.insert(p.id, p.prediction);
    }
    records
        .iter()
        .map(|r| {
            by_id
                .remove(&r.id)
                .ok_or_else(|| Error::InvalidInput(format!("no prediction for sample `{}`", r.id)))
        })
        .collect()
}

fn predictions_from(
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    records: &[SampleRecord],
) -> Result<Option<Vec<String>>> {
    if let Some(p) = predictions {
        return load_predictions(p, records).map(Some);
    }
    if let Some(c) = checkpoint {
        let (model, vocab) = checkpoint::load(c)?;
        return predict_all(&model, &vocab, records).map(Some);
    }
    Ok(None)
}

fn run_tokenize(a: &TokenizeArgs) -> Result<()> {
    let records = load_dataset(&a.sample.data)?;
    let rec = select(&records, a.sample.id.as_deref())?;
    let vocab = load_vocab(a.sample.vocab.as_deref())?;
    let run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = run.model_config(vocab.len())?;
    cfg.separation_strategy = a.strategy;
    let (stream, _, _) = prepare_input(&rec, &vocab, &cfg)?;
    emit(a.out.as_deref(), &stream)
}

#[derive(Serialize)]
struct BiasDump {
    id: String,
    grid: PatchGrid,
    /// Stream indices of the OCR segment.
    ocr_span: [usize; 2],
    /// Row-major `m × m` bucket indices over the OCR segment.
    buckets: Vec<Vec<usize>>,
    /// Per head, `m × m` bias values (absent without a checkpoint).
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<Vec<Vec<f64>>>>,
    /// Per layer, per head, `n × n` encoder attention probabilities.
    #[serde(skip_serializing_if = "Option::is_none")]
    attention: Option<Vec<Vec<Vec<Vec<f64>>>>>,
}

fn run_bias(a: &BiasArgs) -> Result<()> {
    let records = load_dataset(&a.sample.data)?;
    let rec = select(&records, a.sample.id.as_deref())?;
    let loaded = a.checkpoint.as_deref().map(checkpoint::load).transpose()?;
    if a.attention && loaded.is_none() {
        return Err(Error::InvalidInput("--attention needs --checkpoint".into()));
    }
    let (mut cfg, vocab, table) = match &loaded {
        Some((m, v)) => (m.config.clone(), v.clone(), Some(m.params.bucket_table.clone())),
        None => {
            let v = load_vocab(a.sample.vocab.as_deref())?;
            (ModelConfig::toy(v.len()), v, None)
        }
    };
    if loaded.is_none() {
        cfg.separation_strategy = a.strategy;
    }
    let (stream, ocr, obj) = prepare_input(&rec, &vocab, &cfg)?;
    let patches = stream.ocr_patches();
    let m = patches.len();
    let nb = table.as_ref().map_or(cfg.num_buckets, BucketTable::num_buckets);
    let flat = pairwise_buckets(&patches, nb)?;
    let buckets = (0..m).map(|i| flat[i * m..(i + 1) * m].to_vec()).collect();
    let bias = match &table {
        Some(t) => {
            let b = pairwise_bias(&patches, t)?;
            Some((0..t.num_heads()).map(|h| to_rows(&b.head(h))).collect())
        }
        None => None,
    };
    let attention = match (&loaded, a.attention) {
        (Some((model, _)), true) => {
            let mut tape = Tape::new();
            let enc = model.encode(
                &mut tape,
                &crate::model::EncoderInput {
                    stream: &stream,
                    ocr: &ocr,
                    obj: &obj,
                },
            )?;
            Some(
                enc.trace
                    .iter()
                    .map(|layer| layer.probs.iter().map(|&p| to_rows(tape.value(p))).collect())
                    .collect(),
            )
        }
        _ => None,
    };
    emit(
        a.out.as_deref(),
        &BiasDump {
            id: rec.id,
            grid: cfg.grid,
            ocr_span: [stream.ocr_span.start, stream.ocr_span.end],
            buckets,
            bias,
            attention,
        },
    )
}

fn to_rows(m: &crate::tensor::Mat) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let base = match a.corpus {
        CorpusKind::Mixed => SynthOptions::default(),
        CorpusKind::Proximity => SynthOptions::proximity(a.seed, a.n),
    };
    let opts = SynthOptions {
        seed: a.seed,
        n: a.n,
        feature_dim: a.feature_dim,
        pseudo_pool: a.pseudo_pool,
        ..base
    };
    let records = synth_generate(&opts, &Vocab::default_vocab())?;
    write_dataset(&a.out, &records)
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.preset.is_some() {
        run.preset = a.preset;
    }
    if a.seed.is_some() {
        run.seed = a.seed;
    }
    if a.position_mode.is_some() {
        run.position_mode = a.position_mode;
    }
    if a.strategy.is_some() {
        run.separation_strategy = a.strategy;
    }
    if a.max_iters.is_some() {
        run.max_iters = a.max_iters;
    }
    let vocab = load_vocab(a.vocab.as_deref())?;
    let cfg = run.model_config(vocab.len())?;
    let optim = run.optim_config()?;
    let seed = run.seed.unwrap_or(0);
    let records = load_dataset(&a.data)?;
    let data = prepare_dataset(&records, &vocab, &cfg)?;
    let model = Model::new(cfg, seed)?;
    let mut hook = |m: &Model| {
        let preds = predict_all(m, &vocab, &records)?;
        let r = evaluate(&records, &preds, ANLS_THRESHOLD)?;
        Ok((r.soft_accuracy, r.anls))
    };
    let out = train_loop(model, &data, &optim, seed, Some(&mut hook))?;
    checkpoint::save(&a.out, &out.model, &vocab)?;
    if let Some(p) = &a.log {
        write_log(p, &out.log)?;
    }
    Ok(())
}

fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in log {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let records = load_dataset(&a.data)?;
    let preds = predictions_from(a.checkpoint.as_deref(), a.predictions.as_deref(), &records)?
        .ok_or_else(|| Error::InvalidInput("one of --checkpoint or --predictions is required".into()))?;
    let threshold = if a.raw_anls { 0.0 } else { ANLS_THRESHOLD };
    emit(a.out.as_deref(), &evaluate(&records, &preds, threshold)?)
}

fn run_stats(a: &StatsArgs) -> Result<()> {
    let records = load_dataset(&a.data)?;
    let stats = match predictions_from(a.checkpoint.as_deref(), a.predictions.as_deref(), &records)? {
        Some(p) => answer_length_stats(&records, &p)?,
        None => answer_length_ratios(&records),
    };
    emit(a.out.as_deref(), &stats)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Tokenize(a) => run_tokenize(a),
        Command::Bias(a) => run_bias(a),
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Stats(a) => run_stats(a),
        Command::Vocab(a) => Vocab::default_vocab().save(&a.out),
    }
}
