//! Early-exit decoding.
//!
//! Each token runs the backbone blocks in order. After every tapped block the
//! matching head scores its distribution; the first head whose confidence
//! reaches its threshold emits its argmax and the remaining blocks are not
//! run. If no head clears its threshold the backbone's own prediction is used.
//!
//! Later positions still attend to every layer, so a skipped layer needs a
//! key/value entry for the exited position:
//!
//! * [`FillMode::StateCopy`] projects the exit hidden state through each
//!   skipped layer's norm and key/value maps (no full block runs);
//! * [`FillMode::ExactPropagate`] runs the skipped blocks only to populate the
//!   cache, giving exactly the backbone's attention state.
//!
//! Block accounting counts decision blocks; fill work is tracked separately.

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, KvCache, Token};
use crate::calibrate::{confidence, ThresholdTable};
use crate::error::{Error, Result};
use crate::heads::HeadBank;
use crate::math::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum FillMode {
    #[default]
    #[serde(rename = "state-copy")]
    StateCopy,
    #[serde(rename = "exact")]
    ExactPropagate,
}

impl std::str::FromStr for FillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "state-copy" => Ok(FillMode::StateCopy),
            "exact" => Ok(FillMode::ExactPropagate),
            other => Err(Error::Argument(format!(
                "unknown fill mode {other:?} (expected state-copy or exact)"
            ))),
        }
    }
}

impl std::fmt::Display for FillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FillMode::StateCopy => "state-copy",
            FillMode::ExactPropagate => "exact",
        })
    }
}

/// Instrumentation counters, incremented where the work happens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCounters {
    /// Full blocks run while prefilling the prompt.
    pub prefill_blocks: u64,
    /// Full blocks run to reach an exit decision.
    pub decision_blocks: u64,
    /// Full blocks run only to populate the cache (exact fill).
    pub fill_blocks: u64,
    /// Key/value projections for skipped layers (state-copy fill).
    pub kv_fills: u64,
}

/// Attention state of one decoding session.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    kv: KvCache,
    pub fill_mode: FillMode,
    pub counters: BlockCounters,
}

impl AttentionCache {
    pub fn new(model: &Backbone, fill_mode: FillMode) -> Self {
        Self {
            kv: KvCache::new(model.config.n_layers),
            fill_mode,
            counters: BlockCounters::default(),
        }
    }

    /// Positions processed so far.
    pub fn len(&self) -> usize {
        self.kv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kv.is_empty()
    }

    /// Entries held by each layer.
    pub fn layer_lens(&self) -> Vec<usize> {
        self.kv.layers.iter().map(|l| l.len()).collect()
    }

    /// Runs `tokens` through every block without exit decisions.
    pub fn prefill(&mut self, model: &Backbone, tokens: &[Token]) -> Result<()> {
        for &t in tokens {
            let mut x = model.embed(t, self.kv.len())?;
            for layer in 0..model.config.n_layers {
                x = model.block_step(layer, &x, &mut self.kv.layers[layer]);
                self.counters.prefill_blocks += 1;
            }
        }
        Ok(())
    }
}

/// Where a token's computation stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitPoint {
    Head(usize),
    Final,
}

impl ExitPoint {
    /// Slot in exit histograms: head index, or `num_heads` for the final layer.
    pub fn slot(&self, num_heads: usize) -> usize {
        match self {
            ExitPoint::Head(k) => *k,
            ExitPoint::Final => num_heads,
        }
    }
}

impl Serialize for ExitPoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ExitPoint::Head(k) => s.serialize_u64(*k as u64),
            ExitPoint::Final => s.serialize_str("final"),
        }
    }
}

impl<'de> Deserialize<'de> for ExitPoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Head(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Head(k) => Ok(ExitPoint::Head(k)),
            Raw::Text(s) if s == "final" => Ok(ExitPoint::Final),
            Raw::Text(s) => Err(de::Error::custom(format!("bad exit point {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub exited_at: ExitPoint,
    /// Confidence of every head evaluated for this token, in tap order.
    pub confidence_values: Vec<f64>,
    pub token: Token,
    pub blocks_executed: usize,
}

fn check_table(bank: &HeadBank, table: &ThresholdTable) -> Result<()> {
    if bank.len() != table.num_heads() {
        return Err(Error::Configuration(format!(
            "{} heads but {} thresholds",
            bank.len(),
            table.num_heads()
        )));
    }
    Ok(())
}

/// Processes `token` at position `cache.len()` and decides the next token.
pub fn step(
    model: &Backbone,
    bank: &HeadBank,
    table: &ThresholdTable,
    cache: &mut AttentionCache,
    token: Token,
) -> Result<ExitDecision> {
    check_table(bank, table)?;
    let n_layers = model.config.n_layers;
    let mut x = model.embed(token, cache.kv.len())?;
    let mut confidence_values = Vec::with_capacity(bank.len());
    let mut next_head = 0;
    for layer in 0..n_layers {
        x = model.block_step(layer, &x, &mut cache.kv.layers[layer]);
        cache.counters.decision_blocks += 1;
        let Some(head) = bank.heads.get(next_head) else { continue };
        if head.tap_index != layer + 1 {
            continue;
        }
        let p = head.distribution(&x)?;
        let c = confidence(table.metric, &p)?;
        confidence_values.push(c);
        if c >= table.tau[next_head] {
            fill_skipped(model, cache, layer + 1, x);
            return Ok(ExitDecision {
                exited_at: ExitPoint::Head(next_head),
                confidence_values,
                token: p.argmax() as Token,
                blocks_executed: layer + 1,
            });
        }
        next_head += 1;
    }
    Ok(ExitDecision {
        exited_at: ExitPoint::Final,
        confidence_values,
        token: argmax(&model.logits_from_hidden(&x)) as Token,
        blocks_executed: n_layers,
    })
}

fn fill_skipped(model: &Backbone, cache: &mut AttentionCache, first: usize, exit_hidden: Vec<f32>) {
    match cache.fill_mode {
        FillMode::StateCopy => {
            for layer in first..model.config.n_layers {
                let (k, v) = model.kv_projection(layer, &exit_hidden);
                cache.kv.layers[layer].push(&k, &v);
                cache.counters.kv_fills += 1;
            }
        }
        FillMode::ExactPropagate => {
            let mut x = exit_hidden;
            for layer in first..model.config.n_layers {
                x = model.block_step(layer, &x, &mut cache.kv.layers[layer]);
                cache.counters.fill_blocks += 1;
            }
        }
    }
}

/// Aggregate block accounting for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTotals {
    pub tokens: usize,
    /// One slot per head plus a final slot for full-depth tokens.
    pub exit_counts: Vec<usize>,
    pub blocks_executed: u64,
    pub baseline_blocks: u64,
    /// `baseline_blocks / blocks_executed`.
    pub speedup: f64,
    pub fill_blocks: u64,
    pub kv_fills: u64,
    /// Counts fill blocks as executed work.
    pub effective_speedup: f64,
}

impl TraceTotals {
    fn from_decisions(
        decisions: &[ExitDecision],
        num_heads: usize,
        n_layers: usize,
        counters: &BlockCounters,
    ) -> Self {
        let mut exit_counts = vec![0usize; num_heads + 1];
        let mut blocks = 0u64;
        for d in decisions {
            exit_counts[d.exited_at.slot(num_heads)] += 1;
            blocks += d.blocks_executed as u64;
        }
        let baseline = (decisions.len() * n_layers) as u64;
        let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        Self {
            tokens: decisions.len(),
            exit_counts,
            blocks_executed: blocks,
            baseline_blocks: baseline,
            speedup: ratio(baseline, blocks),
            fill_blocks: counters.fill_blocks,
            kv_fills: counters.kv_fills,
            effective_speedup: ratio(baseline, blocks + counters.fill_blocks),
        }
    }

    pub fn exit_fractions(&self) -> Vec<f64> {
        self.exit_counts
            .iter()
            .map(|&c| if self.tokens == 0 { 0.0 } else { c as f64 / self.tokens as f64 })
            .collect()
    }

    pub fn mean_blocks_per_token(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.blocks_executed as f64 / self.tokens as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub fill_mode: FillMode,
    pub prompt: Vec<Token>,
    pub output: Vec<Token>,
    pub tokens: Vec<ExitDecision>,
    pub totals: TraceTotals,
    pub counters: BlockCounters,
}

impl GenerationTrace {
    pub fn output_text(&self) -> String {
        crate::backbone::decode(&self.output)
    }
}

fn check_capacity(model: &Backbone, prompt_len: usize, n: usize) -> Result<()> {
    if prompt_len == 0 {
        return Err(Error::Argument("empty prompt".into()));
    }
    if prompt_len + n > model.config.max_seq_len + 1 {
        return Err(Error::Capacity(format!(
            "prompt of {prompt_len} tokens plus {n} generated exceeds max_seq_len {}",
            model.config.max_seq_len
        )));
    }
    Ok(())
}

/// Autoregressive early-exit generation of `max_tokens` tokens.
pub fn generate(
    model: &Backbone,
    bank: &HeadBank,
    table: &ThresholdTable,
    prompt: &[Token],
    max_tokens: usize,
    fill_mode: FillMode,
) -> Result<GenerationTrace> {
    if max_tokens == 0 {
        return Err(Error::Argument("max_tokens must be >= 1".into()));
    }
    check_capacity(model, prompt.len(), max_tokens)?;
    check_table(bank, table)?;
    bank.check_consistent(model)?;
    run_session(model, bank, table, prompt, fill_mode, max_tokens, |d, _| d.token)
}

/// Shared decode loop: `next_input(decision, i)` picks the token fed after
/// decision `i`.
fn run_session(
    model: &Backbone,
    bank: &HeadBank,
    table: &ThresholdTable,
    prompt: &[Token],
    fill_mode: FillMode,
    n: usize,
    mut next_input: impl FnMut(&ExitDecision, usize) -> Token,
) -> Result<GenerationTrace> {
    let mut cache = AttentionCache::new(model, fill_mode);
    cache.prefill(model, &prompt[..prompt.len() - 1])?;
    let mut input = *prompt.last().expect("non-empty prompt");
    let mut decisions = Vec::with_capacity(n);
    let mut output = Vec::with_capacity(n);
    for i in 0..n {
        let d = step(model, bank, table, &mut cache, input)?;
        output.push(d.token);
        input = next_input(&d, i);
        decisions.push(d);
        if i + 1 == n {
            break;
        }
    }
    let totals = TraceTotals::from_decisions(&decisions, bank.len(), model.config.n_layers, &cache.counters);
    Ok(GenerationTrace {
        fill_mode,
        prompt: prompt.to_vec(),
        output,
        tokens: decisions,
        totals,
        counters: cache.counters,
    })
}

/// Teacher-forced comparison against the backbone's greedy continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub epsilon: f64,
    pub fill_mode: FillMode,
    pub positions: usize,
    /// Fraction of positions whose emitted token equals the reference token.
    pub agreement: f64,
    pub totals: TraceTotals,
    pub exit_fractions: Vec<f64>,
    /// Per head: agreement among positions exiting there (`None` if none did).
    pub exit_precision: Vec<Option<f64>>,
    pub mean_blocks_per_token: f64,
    /// Blocks executed for every evaluated position, prompt by prompt.
    pub exit_depths: Vec<usize>,
}

/// Backbone greedily continues each prompt by `gen_len` tokens; the early-exit
/// model is then fed the same reference tokens and scored per position.
pub fn agreement_eval(
    model: &Backbone,
    bank: &HeadBank,
    table: &ThresholdTable,
    prompts: &[Vec<Token>],
    gen_len: usize,
    fill_mode: FillMode,
) -> Result<AgreementReport> {
    if prompts.is_empty() {
        return Err(Error::Argument("no evaluation prompts".into()));
    }
    if gen_len == 0 {
        return Err(Error::Argument("gen_len must be >= 1".into()));
    }
    check_table(bank, table)?;
    bank.check_consistent(model)?;
    let references = prompts
        .iter()
        .map(|p| {
            check_capacity(model, p.len(), gen_len)?;
            model.greedy_generate(p, gen_len)
        })
        .collect::<Result<Vec<_>>>()?;
    agreement_eval_with_references(model, bank, table, prompts, &references, fill_mode)
}

/// [`agreement_eval`] with precomputed reference continuations.
pub fn agreement_eval_with_references(
    model: &Backbone,
    bank: &HeadBank,
    table: &ThresholdTable,
    prompts: &[Vec<Token>],
    references: &[Vec<Token>],
    fill_mode: FillMode,
) -> Result<AgreementReport> {
    check_table(bank, table)?;
    let k = bank.len();
    let mut decisions = Vec::new();
    let mut agree = Vec::new();
    let mut counters = BlockCounters::default();
    for (prompt, reference) in prompts.iter().zip(references) {
        check_capacity(model, prompt.len(), reference.len())?;
        let trace = run_session(model, bank, table, prompt, fill_mode, reference.len(), |_, i| reference[i])?;
        for (d, &r) in trace.tokens.iter().zip(reference) {
            agree.push(d.token == r);
        }
        counters.fill_blocks += trace.counters.fill_blocks;
        counters.kv_fills += trace.counters.kv_fills;
        counters.decision_blocks += trace.counters.decision_blocks;
        decisions.extend(trace.tokens);
    }
    let totals = TraceTotals::from_decisions(&decisions, k, model.config.n_layers, &counters);
    let mut hits = vec![(0usize, 0usize); k];
    for (d, &a) in decisions.iter().zip(&agree) {
        if let ExitPoint::Head(h) = d.exited_at {
            hits[h].0 += a as usize;
            hits[h].1 += 1;
        }
    }
    let positions = decisions.len();
    Ok(AgreementReport {
        epsilon: table.epsilon,
        fill_mode,
        positions,
        agreement: if positions == 0 {
            1.0
        } else {
            agree.iter().filter(|&&a| a).count() as f64 / positions as f64
        },
        exit_fractions: totals.exit_fractions(),
        exit_precision: hits
            .iter()
            .map(|&(c, n)| (n > 0).then(|| c as f64 / n as f64))
            .collect(),
        mean_blocks_per_token: totals.mean_blocks_per_token(),
        exit_depths: decisions.iter().map(|d| d.blocks_executed).collect(),
        totals,
    })
}
