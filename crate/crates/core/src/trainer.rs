//! Self-supervised training of the exit heads against the frozen backbone.
//!
//! Training data is produced by the backbone itself: it continues a set of
//! prompts, and at every generated position the tapped hidden states are
//! paired with the backbone's own next-token distribution. Each head `k`
//! minimises
//!
//! ```text
//! loss_k = (1 − λ) · CE(z_k, p_θ) − λ · H(softmax(z_k))
//! ```
//!
//! where `z_k` are the head logits, and the total loss is the sum over heads.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{encode, Backbone, Token, LN_EPS};
use crate::error::{Error, Result};
use crate::heads::{ExitHead, HeadBank};
use crate::math::{self, argmax, ProbVector};
use crate::optim::Adam;
use crate::rng::Rng;

/// Training prompts used when none are configured.
pub const DEFAULT_TRAIN_PROMPTS: [&str; 5] = [
    "This is an example script:",
    "My name is",
    "I am a",
    "Welcome to",
    "what is a",
];

/// One self-generated training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub hidden_at_tap: Vec<Vec<f32>>,
    pub teacher: ProbVector,
    pub teacher_argmax: Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub lambda: f64,
    pub lr: f32,
    pub steps: usize,
    pub batch_prompts: Vec<String>,
    pub gen_len: usize,
    pub seed: u64,
    /// Samples per optimisation step.
    pub minibatch: usize,
    /// Sampling temperature for data generation; 0 means greedy.
    pub temperature: f32,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lambda: 0.95,
            lr: 1e-3,
            steps: 2000,
            batch_prompts: DEFAULT_TRAIN_PROMPTS.iter().map(|s| s.to_string()).collect(),
            gen_len: 64,
            seed: 42,
            minibatch: 64,
            temperature: 0.0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda) {
            problems.push(format!("lambda must be in [0, 1] (got {})", self.lambda));
        }
        if !(self.lr > 0.0) {
            problems.push(format!("lr must be positive (got {})", self.lr));
        }
        if self.gen_len == 0 {
            problems.push("gen_len must be >= 1".into());
        }
        if self.minibatch == 0 {
            problems.push("minibatch must be >= 1".into());
        }
        if !(self.temperature >= 0.0) {
            problems.push(format!("temperature must be >= 0 (got {})", self.temperature));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Argument(format!("lambda {lambda} outside [0, 1]")))
    }
}

fn check_lengths(logits: &[f32], teacher: &ProbVector) -> Result<()> {
    if logits.len() != teacher.len() {
        return Err(Error::Dimension(format!(
            "{} head logits vs {} teacher probabilities",
            logits.len(),
            teacher.len()
        )));
    }
    Ok(())
}

/// `(1 − λ) · CE(logits, teacher) − λ · H(softmax(logits))`.
pub fn head_loss(logits: &[f32], teacher: &ProbVector, lambda: f64) -> Result<f64> {
    check_lengths(logits, teacher)?;
    check_lambda(lambda)?;
    let ce = math::cross_entropy(logits, teacher)?;
    let h = math::entropy_f64(math::softmax_f64(logits).into_iter());
    Ok((1.0 - lambda) * ce - lambda * h)
}

/// Gradient of [`head_loss`] with respect to the logits:
/// `(1 − λ)(p − t) + λ · p ⊙ (ln p + H)`.
pub fn head_loss_grad(logits: &[f32], teacher: &ProbVector, lambda: f64) -> Result<Vec<f64>> {
    check_lengths(logits, teacher)?;
    check_lambda(lambda)?;
    Ok(logit_grad(&math::softmax_f64(logits), teacher, lambda))
}

fn logit_grad(p: &[f64], teacher: &ProbVector, lambda: f64) -> Vec<f64> {
    let h = math::entropy_f64(p.iter().copied());
    p.iter()
        .zip(teacher.as_slice())
        .map(|(&pi, &ti)| {
            let ent = if pi > 0.0 { pi * (pi.ln() + h) } else { 0.0 };
            (1.0 - lambda) * (pi - ti as f64) + lambda * ent
        })
        .collect()
}

/// Parameter gradients of one head, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub proj: Vec<f64>,
}

impl HeadGrad {
    pub fn zeros(head: &ExitHead) -> Self {
        Self {
            gain: vec![0.0; head.norm.gain.len()],
            bias: vec![0.0; head.norm.bias.len()],
            proj: vec![0.0; head.proj.data().len()],
        }
    }

    fn to_f32(&self) -> [Vec<f32>; 3] {
        let cast = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
        [cast(&self.gain), cast(&self.bias), cast(&self.proj)]
    }
}

/// Statistics of one head on one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadEval {
    pub loss: f64,
    pub correct: bool,
    pub entropy: f64,
}

/// Loss of `head` on (`hidden`, `teacher`) and its parameter gradient,
/// scaled by `weight` and added into `grad`.
pub fn accumulate_head_grad(
    head: &ExitHead,
    hidden: &[f32],
    teacher: &ProbVector,
    lambda: f64,
    weight: f64,
    grad: &mut HeadGrad,
) -> Result<HeadEval> {
    let d = head.norm.gain.len();
    if hidden.len() != d {
        return Err(Error::Dimension(format!(
            "hidden state of length {} for a head of width {d}",
            hidden.len()
        )));
    }
    let (mean, rstd) = math::moments(hidden, LN_EPS);
    let xhat: Vec<f32> = hidden
        .iter()
        .map(|&v| ((v as f64 - mean) * rstd) as f32)
        .collect();
    let normed: Vec<f32> = xhat
        .iter()
        .zip(head.norm.gain.iter().zip(&head.norm.bias))
        .map(|(&x, (&g, &b))| x * g + b)
        .collect();
    let logits = math::vec_mat(&normed, &head.proj)?;
    check_lengths(&logits, teacher)?;
    let p = math::softmax_f64(&logits);
    let dz = logit_grad(&p, teacher, lambda);
    let v = logits.len();
    for i in 0..d {
        let ni = normed[i] as f64 * weight;
        let row = &head.proj.data()[i * v..(i + 1) * v];
        let grow = &mut grad.proj[i * v..(i + 1) * v];
        let mut dn = 0f64;
        for j in 0..v {
            grow[j] += ni * dz[j];
            dn += row[j] as f64 * dz[j];
        }
        dn *= weight;
        grad.gain[i] += dn * xhat[i] as f64;
        grad.bias[i] += dn;
    }
    let entropy = math::entropy_f64(p.iter().copied());
    let ce = -math::log_softmax_f64(&logits)
        .iter()
        .zip(teacher.as_slice())
        .map(|(lp, &t)| t as f64 * lp.max(math::PROB_FLOOR.ln()))
        .sum::<f64>();
    Ok(HeadEval {
        loss: (1.0 - lambda) * ce - lambda * entropy,
        correct: argmax(&logits) == teacher.argmax(),
        entropy,
    })
}

/// Generates `gen_len` tokens from every prompt and records one sample per
/// generated position. Greedy decoding.
pub fn build_batch(
    model: &Backbone,
    prompts: &[Vec<Token>],
    gen_len: usize,
    rng: &mut Rng,
) -> Result<Vec<TrainSample>> {
    Ok(generate_samples(model, prompts, gen_len, 0.0, rng)?.0)
}

/// Like [`build_batch`] with optional temperature sampling; also returns each
/// prompt extended by its continuation.
pub fn generate_samples(
    model: &Backbone,
    prompts: &[Vec<Token>],
    gen_len: usize,
    temperature: f32,
    rng: &mut Rng,
) -> Result<(Vec<TrainSample>, Vec<Vec<Token>>)> {
    if prompts.is_empty() {
        return Err(Error::Argument("no prompts".into()));
    }
    if gen_len == 0 {
        return Err(Error::Argument("gen_len must be >= 1".into()));
    }
    let max = model.config.max_seq_len;
    let mut samples = Vec::with_capacity(prompts.len() * gen_len);
    let mut contexts = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        if prompt.len() + gen_len > max + 1 {
            return Err(Error::Capacity(format!(
                "prompt of {} tokens plus {gen_len} generated exceeds max_seq_len {max}",
                prompt.len()
            )));
        }
        let (mut cache, mut trace) = model.prefill(prompt)?;
        let mut ctx = prompt.clone();
        for i in 0..gen_len {
            let teacher = math::softmax(&trace.final_logits)?;
            let teacher_argmax = teacher.argmax() as Token;
            let next = if temperature > 0.0 {
                let weights: Vec<f64> = math::softmax_f64(
                    &trace
                        .final_logits
                        .iter()
                        .map(|z| z / temperature)
                        .collect::<Vec<_>>(),
                );
                rng.categorical(&weights) as Token
            } else {
                teacher_argmax
            };
            samples.push(TrainSample {
                hidden_at_tap: std::mem::take(&mut trace.hidden_at_tap),
                teacher,
                teacher_argmax,
            });
            ctx.push(next);
            if i + 1 < gen_len {
                trace = model.decode_step(&mut cache, next)?;
            }
        }
        contexts.push(ctx);
    }
    Ok((samples, contexts))
}

/// Epoch-wise sample supply: each epoch continues every context by `gen_len`
/// tokens, sliding the window when the context would overflow.
struct SampleStream<'a> {
    model: &'a Backbone,
    contexts: Vec<Vec<Token>>,
    gen_len: usize,
    temperature: f32,
    pool: Vec<TrainSample>,
    cursor: usize,
    rng: Rng,
}

impl<'a> SampleStream<'a> {
    fn new(model: &'a Backbone, prompts: Vec<Vec<Token>>, settings: &TrainSettings) -> Self {
        Self {
            model,
            contexts: prompts,
            gen_len: settings.gen_len,
            temperature: settings.temperature,
            pool: Vec::new(),
            cursor: 0,
            rng: Rng::child(settings.seed, 1),
        }
    }

    fn refill(&mut self) -> Result<()> {
        let keep = self.model.config.max_seq_len + 1 - self.gen_len;
        let windows: Vec<Vec<Token>> = self
            .contexts
            .iter()
            .map(|c| c[c.len().saturating_sub(keep)..].to_vec())
            .collect();
        let (mut pool, contexts) =
            generate_samples(self.model, &windows, self.gen_len, self.temperature, &mut self.rng)?;
        self.rng.shuffle(&mut pool);
        self.pool = pool;
        self.contexts = contexts;
        self.cursor = 0;
        Ok(())
    }

    fn next_batch(&mut self, size: usize) -> Result<&[TrainSample]> {
        if self.pool.is_empty() || self.cursor + size.min(self.pool.len()) > self.pool.len() {
            self.refill()?;
        }
        let n = size.min(self.pool.len());
        let out = &self.pool[self.cursor..self.cursor + n];
        self.cursor += n;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub head_index: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub entropy: f64,
}

/// Per-step, per-head loss, accuracy against the teacher and mean entropy.
/// Metrics of step `s` are measured before that step's update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

/// Averages over a range of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSummary {
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub entropy: Vec<f64>,
}

impl HeadSummary {
    pub fn mean_accuracy(&self) -> f64 {
        mean(&self.accuracy)
    }

    pub fn mean_entropy(&self) -> f64 {
        mean(&self.entropy)
    }

    pub fn mean_loss(&self) -> f64 {
        mean(&self.loss)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl TrainLog {
    pub fn num_steps(&self) -> usize {
        self.rows.iter().map(|r| r.step + 1).max().unwrap_or(0)
    }

    pub fn num_heads(&self) -> usize {
        self.rows.iter().map(|r| r.head_index + 1).max().unwrap_or(0)
    }

    /// Per-head means over steps in `[from, to)`.
    pub fn summary(&self, from: usize, to: usize) -> HeadSummary {
        let k = self.num_heads();
        let mut sums = vec![(0f64, 0f64, 0f64, 0usize); k];
        for r in self.rows.iter().filter(|r| r.step >= from && r.step < to) {
            let s = &mut sums[r.head_index];
            s.0 += r.loss;
            s.1 += r.accuracy;
            s.2 += r.entropy;
            s.3 += 1;
        }
        let avg = |f: fn(&(f64, f64, f64, usize)) -> f64| {
            sums.iter()
                .map(|s| if s.3 == 0 { 0.0 } else { f(s) / s.3 as f64 })
                .collect::<Vec<_>>()
        };
        HeadSummary {
            loss: avg(|s| s.0),
            accuracy: avg(|s| s.1),
            entropy: avg(|s| s.2),
        }
    }

    /// Means over the last `fraction` of steps (at least one step).
    pub fn final_summary(&self, fraction: f64) -> HeadSummary {
        let n = self.num_steps();
        let w = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        self.summary(n - w.min(n), n)
    }

    /// Means over the first `fraction` of steps (at least one step).
    pub fn initial_summary(&self, fraction: f64) -> HeadSummary {
        let n = self.num_steps();
        let w = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        self.summary(0, w)
    }

    pub fn write_csv(&self, mut out: impl Write, preamble: Option<&str>) -> Result<()> {
        if let Some(p) = preamble {
            writeln!(out, "# {p}").map_err(|e| Error::io("<trainlog>", e))?;
        }
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<trainlog>", e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<TrainLogRow>, _>>()?;
        Ok(Self { rows })
    }
}

/// Trains every head of `bank` against `model`'s own predictions.
///
/// Only head parameters receive updates; the backbone is borrowed immutably.
/// Gradients are accumulated in tap order, then sample order.
pub fn train_heads(
    model: &Backbone,
    bank: &HeadBank,
    settings: &TrainSettings,
) -> Result<(HeadBank, TrainLog)> {
    train_heads_with_progress(model, bank, settings, |_| {})
}

pub fn train_heads_with_progress(
    model: &Backbone,
    bank: &HeadBank,
    settings: &TrainSettings,
    mut on_step: impl FnMut(&[TrainLogRow]),
) -> Result<(HeadBank, TrainLog)> {
    settings.validate()?;
    bank.check_consistent(model)?;
    if settings.batch_prompts.is_empty() {
        return Err(Error::Argument("no training prompts".into()));
    }
    let prompts: Vec<Vec<Token>> = settings.batch_prompts.iter().map(|p| encode(p)).collect();
    train_heads_on_prompts(model, bank, settings, prompts, &mut on_step)
}

/// Same as [`train_heads`] with pre-encoded prompts.
pub fn train_heads_on_prompts(
    model: &Backbone,
    bank: &HeadBank,
    settings: &TrainSettings,
    prompts: Vec<Vec<Token>>,
    on_step: &mut dyn FnMut(&[TrainLogRow]),
) -> Result<(HeadBank, TrainLog)> {
    settings.validate()?;
    bank.check_consistent(model)?;
    if prompts.is_empty() {
        return Err(Error::Argument("no training prompts".into()));
    }
    if prompts.iter().any(|p| p.len() + settings.gen_len > model.config.max_seq_len + 1) {
        return Err(Error::Capacity(format!(
            "a training prompt plus gen_len {} exceeds max_seq_len {}",
            settings.gen_len, model.config.max_seq_len
        )));
    }
    let mut bank = bank.clone();
    let mut opt = Adam::new(
        settings.lr,
        bank.heads
            .iter()
            .flat_map(|h| h.tensors().map(|t| t.len()))
            .collect::<Vec<_>>(),
    );
    let mut stream = SampleStream::new(model, prompts, settings);
    let mut log = TrainLog::default();
    for step in 0..settings.steps {
        let batch = stream.next_batch(settings.minibatch)?;
        let weight = 1.0 / batch.len() as f64;
        let mut grads = Vec::with_capacity(bank.len());
        let first_row = log.rows.len();
        for (k, head) in bank.heads.iter().enumerate() {
            let mut g = HeadGrad::zeros(head);
            let (mut loss, mut correct, mut ent) = (0f64, 0usize, 0f64);
            for s in batch {
                let e = accumulate_head_grad(head, &s.hidden_at_tap[k], &s.teacher, settings.lambda, weight, &mut g)?;
                loss += e.loss;
                correct += e.correct as usize;
                ent += e.entropy;
            }
            let n = batch.len() as f64;
            log.rows.push(TrainLogRow {
                step,
                head_index: k,
                loss: loss / n,
                accuracy: correct as f64 / n,
                entropy: ent / n,
            });
            grads.push(g.to_f32());
        }
        on_step(&log.rows[first_row..]);
        let params: Vec<&mut [f32]> = bank.heads.iter_mut().flat_map(|h| h.tensors_mut()).collect();
        let grad_refs: Vec<&[f32]> = grads.iter().flat_map(|g| g.iter().map(|v| v.as_slice())).collect();
        opt.step(params, grad_refs);
    }
    Ok((bank, log))
}
