//! Multi-label BCE objective, warmup/step-decay schedule, Adam and the
//! teacher-forced training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::metrics::majority_answer;
use crate::model::{EncoderInput, Gradients, Model, ModelConfig, ModelParameters};
use crate::tape::{bce_mean_value, Tape};
use crate::tensor::Mat;
use crate::tokenstream::{ObjEntry, OcrEntry, StreamBuilder, TokenStream};
use crate::vocab::{Vocab, EOS_ID, PAD_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Run the evaluation hook every this many iterations (0 = never).
    pub eval_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            warmup_iters: 1000,
            warmup_factor: 0.2,
            decay_steps: vec![14000, 19000],
            decay_factor: 0.1,
            batch_size: 36,
            max_iters: 24000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            eval_every: 0,
        }
    }
}

impl OptimConfig {
    /// Same schedule shape at desk scale. The step size is larger: averaged
    /// over the vocabulary, the loss leaves a small model on the all-negative
    /// plateau at 2e-4.
    pub fn toy() -> Self {
        Self {
            base_lr: 3e-3,
            batch_size: 8,
            max_iters: 2000,
            warmup_iters: 100,
            decay_steps: vec![1200, 1700],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.warmup_factor > 0.0 && self.warmup_factor <= 1.0) {
            return fail("warmup_factor must lie in (0, 1]");
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return fail("decay_steps must be strictly increasing");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be positive");
        }
        if !(self.decay_factor > 0.0) {
            return fail("decay_factor must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return fail("betas must lie in [0, 1) and eps must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return fail("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Mean over the vocabulary of the sigmoid cross-entropy, in the stable
/// `softplus(z) - y z` form.
pub fn bce_loss(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "{} logits vs {} targets",
            logits.len(),
            target.len()
        )));
    }
    Ok(bce_mean_value(logits, target))
}

/// Linear warmup from `warmup_factor * base_lr` to `base_lr`, then one
/// `decay_factor` per decay step reached.
pub fn lr_at(iter: usize, cfg: &OptimConfig) -> f64 {
    if iter < cfg.warmup_iters {
        let frac = iter as f64 / cfg.warmup_iters as f64;
        return cfg.base_lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * frac);
    }
    let passed = cfg.decay_steps.iter().filter(|&&s| iter >= s).count();
    cfg.base_lr * cfg.decay_factor.powi(passed as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ModelParameters) -> Self {
        let zeros: Vec<Mat> = params.tensors().iter().map(|(_, m)| Mat::zeros(m.rows, m.cols)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update. A non-finite gradient aborts before any
/// state changes.
pub fn optim_step(
    params: &mut ModelParameters,
    grads: &Gradients,
    state: &mut OptimState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if tensors.len() != grads.tensors.len() || tensors.len() != state.m.len() {
        return Err(Error::Internal(format!(
            "{} parameters, {} gradients, {} moment slots",
            tensors.len(),
            grads.tensors.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in tensors.iter().zip(&grads.tensors) {
        if p.shape() != g.shape() {
            return Err(Error::Internal(format!("gradient shape mismatch for `{name}`")));
        }
        if let Some(i) = g.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in `{name}` at flat index {i} (value {})",
                g.data[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, (_, p)) in tensors.into_iter().enumerate() {
        let (m, v, g) = (&mut state.m[k].data, &mut state.v[k].data, &grads.tensors[k].data);
        for i in 0..p.data.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p.data[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales `grads` down to `max_norm` when larger; returns the norm before
/// clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if n > max_norm {
        grads.scale(max_norm / n);
    }
    n
}

/// Answer ids cut to the decode budget.
pub fn answer_ids(vocab: &Vocab, answer: &str, max_decode_steps: usize) -> Vec<usize> {
    let mut ids = vocab.tokenize(answer);
    ids.truncate(max_decode_steps.saturating_sub(1));
    ids
}

/// Multi-hot targets, one row per decode step. Row `t` marks the `t`-th id
/// of every answer still in progress and EOS for every finished one.
pub fn build_targets(answers: &[Vec<usize>], steps: usize, vocab_size: usize) -> Result<Mat> {
    let mut y = Mat::zeros(steps, vocab_size);
    for a in answers {
        for t in 0..steps {
            let id = a.get(t).copied().unwrap_or(EOS_ID);
            if id >= vocab_size {
                return Err(Error::InvalidInput(format!("answer token {id} outside vocabulary")));
            }
            y.set(t, id, 1.0);
        }
    }
    Ok(y)
}

/// A record turned into model inputs and teacher-forcing targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub stream: TokenStream,
    pub ocr: Vec<OcrEntry>,
    pub obj: Vec<ObjEntry>,
    /// Start token followed by the majority answer prefix.
    pub decoder_ids: Vec<usize>,
    pub targets: Mat,
}

impl PreparedSample {
    pub fn input(&self) -> EncoderInput<'_> {
        EncoderInput {
            stream: &self.stream,
            ocr: &self.ocr,
            obj: &self.obj,
        }
    }
}

pub fn prepare_input(
    record: &SampleRecord,
    vocab: &Vocab,
    cfg: &ModelConfig,
) -> Result<(TokenStream, Vec<OcrEntry>, Vec<ObjEntry>)> {
    let mut ocr = record.ocr_entries()?;
    for e in &mut ocr {
        e.tokenize(vocab);
    }
    let obj = record.obj_entries()?;
    let stream = StreamBuilder::new(vocab, cfg.grid, cfg.limits).build(
        &record.question,
        &ocr,
        &obj,
        cfg.separation_strategy,
    )?;
    Ok((stream, ocr, obj))
}

pub fn prepare_sample(record: &SampleRecord, vocab: &Vocab, cfg: &ModelConfig) -> Result<PreparedSample> {
    let (stream, ocr, obj) = prepare_input(record, vocab, cfg)?;
    let teacher = answer_ids(vocab, &majority_answer(&record.answers), cfg.max_decode_steps);
    let steps = teacher.len() + 1;
    let mut decoder_ids = vec![PAD_ID];
    decoder_ids.extend_from_slice(&teacher);
    let all: Vec<Vec<usize>> = record
        .answers
        .iter()
        .map(|a| answer_ids(vocab, a, cfg.max_decode_steps))
        .collect();
    let targets = build_targets(&all, steps, cfg.vocab_size)?;
    Ok(PreparedSample {
        id: record.id.clone(),
        stream,
        ocr,
        obj,
        decoder_ids,
        targets,
    })
}

pub fn prepare_dataset(records: &[SampleRecord], vocab: &Vocab, cfg: &ModelConfig) -> Result<Vec<PreparedSample>> {
    records.iter().map(|r| prepare_sample(r, vocab, cfg)).collect()
}

/// Loss and gradients of one sample.
pub fn sample_gradients(model: &Model, sample: &PreparedSample) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let loss = model.sample_loss(&mut tape, &sample.input(), &sample.decoder_ids, &sample.targets)?;
    let value = tape.value(loss).data[0];
    Ok((value, model.gradients(&tape.backward(loss))))
}

/// Mean loss and mean gradients over a batch, summed in batch order.
pub fn batch_gradients(model: &Model, batch: &[&PreparedSample]) -> Result<(f64, Gradients)> {
    let mut total = Gradients::zeros_like(&model.params);
    let mut loss = 0.0;
    for s in batch {
        let (l, g) = sample_gradients(model, s)?;
        loss += l;
        total.add_assign(&g);
    }
    let n = batch.len().max(1) as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anls: Option<f64>,
}

/// Periodic evaluation hook: returns `(soft_accuracy, anls)`.
pub type EvalHook<'a> = dyn FnMut(&Model) -> Result<(f64, f64)> + 'a;

pub struct TrainOutcome {
    pub model: Model,
    pub state: OptimState,
    pub log: Vec<LogEntry>,
}

/// Seeded epoch-wise shuffling that hands out fixed-size batches.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.reshuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

pub fn train_loop(
    mut model: Model,
    data: &[PreparedSample],
    cfg: &OptimConfig,
    seed: u64,
    mut eval: Option<&mut EvalHook>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut state = OptimState::new(&model.params);
    let mut sampler = BatchSampler::new(data.len(), seed);
    let mut log = Vec::with_capacity(cfg.max_iters);
    for iter in 0..cfg.max_iters {
        let batch: Vec<&PreparedSample> = sampler.next_batch(cfg.batch_size).into_iter().map(|i| &data[i]).collect();
        let (loss, mut grads) = batch_gradients(&model, &batch)?;
        let grad_norm = match cfg.grad_clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => grads.global_norm(),
        };
        let lr = lr_at(iter, cfg);
        optim_step(&mut model.params, &grads, &mut state, lr, cfg).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("iteration {iter}: {m}")),
            other => other,
        })?;
        let mut entry = LogEntry {
            iter,
            loss,
            lr,
            grad_norm,
            soft_accuracy: None,
            anls: None,
        };
        if cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0 {
            if let Some(hook) = eval.as_deref_mut() {
                let (acc, anls) = hook(&model)?;
                log::info!("iter {}: loss {loss:.5} soft accuracy {acc:.4}", iter + 1);
                entry.soft_accuracy = Some(acc);
                entry.anls = Some(anls);
            }
        }
        log.push(entry);
    }
    Ok(TrainOutcome { model, state, log })
}
