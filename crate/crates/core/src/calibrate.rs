//! Confidence metrics, calibration records and per-head exit thresholds.
//!
//! For head `k`, the calibration scores are sorted ascending and the
//! threshold is the smallest score `τ` such that, among all calibration
//! records with score `≥ τ`, the fraction whose head argmax matched the
//! backbone argmax is at least `ε`. Heads for which no such score exists get
//! `τ = +∞` and never exit.

use std::io::Write;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Token};
use crate::error::{Error, Result};
use crate::heads::HeadBank;
use crate::math::{self, ProbVector};

/// Calibration prompts used when none are configured.
pub const DEFAULT_CALIBRATION_PROMPTS: [&str; 5] = [
    "A cat is",
    "In Python, a list is",
    "In C, we can define a function",
    "The capital of France is",
    "The derivative of x^2 is",
];

/// Scalar confidence of a distribution; higher always means more confident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ConfidenceMetric {
    /// `p₍₁₎ − p₍₂₎`, in `[0, 1]`.
    #[default]
    #[serde(rename = "breaking-ties")]
    BreakingTies,
    /// `p₍₁₎`, in `[1/V, 1]`.
    #[serde(rename = "max-prob")]
    MaxProb,
    /// `−H(p)`, in `[−ln V, 0]`.
    #[serde(rename = "entropy")]
    NegEntropy,
}

impl ConfidenceMetric {
    pub fn name(&self) -> &'static str {
        match self {
            ConfidenceMetric::BreakingTies => "breaking-ties",
            ConfidenceMetric::MaxProb => "max-prob",
            ConfidenceMetric::NegEntropy => "entropy",
        }
    }

    /// Closed range of attainable scores for a vocabulary of size `v`.
    pub fn range(&self, v: usize) -> (f64, f64) {
        match self {
            ConfidenceMetric::BreakingTies => (0.0, 1.0),
            ConfidenceMetric::MaxProb => (1.0 / v as f64, 1.0),
            ConfidenceMetric::NegEntropy => (-(v as f64).ln(), 0.0),
        }
    }
}

impl std::str::FromStr for ConfidenceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "breaking-ties" => Ok(ConfidenceMetric::BreakingTies),
            "max-prob" => Ok(ConfidenceMetric::MaxProb),
            "entropy" => Ok(ConfidenceMetric::NegEntropy),
            other => Err(Error::Argument(format!(
                "unknown metric {other:?} (expected breaking-ties, max-prob or entropy)"
            ))),
        }
    }
}

impl std::fmt::Display for ConfidenceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn confidence(metric: ConfidenceMetric, p: &ProbVector) -> Result<f64> {
    match metric {
        ConfidenceMetric::BreakingTies => {
            if p.len() < 2 {
                return Err(Error::Argument(
                    "breaking-ties needs at least two classes".into(),
                ));
            }
            let (a, b) = p.top2();
            Ok((a as f64 - b as f64).clamp(0.0, 1.0))
        }
        ConfidenceMetric::MaxProb => Ok(p.top2().0 as f64),
        ConfidenceMetric::NegEntropy => Ok(-math::entropy(p)),
    }
}

/// One (head, score, correctness) observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub head_index: usize,
    pub score: f64,
    #[serde(with = "bool_as_int")]
    pub correct: bool,
}

mod bool_as_int {
    use super::*;

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(de::Error::custom(format!("correct must be 0 or 1, got {other}"))),
        }
    }
}

/// Greedy backbone generation from each prompt; at every generated position
/// each head contributes one record (`K` records per token, head order).
pub fn collect_calibration(
    model: &Backbone,
    bank: &HeadBank,
    prompts: &[Vec<Token>],
    gen_len: usize,
    metric: ConfidenceMetric,
) -> Result<Vec<CalibrationRecord>> {
    bank.check_consistent(model)?;
    if prompts.is_empty() {
        return Err(Error::Argument("no calibration prompts".into()));
    }
    let max = model.config.max_seq_len;
    let mut records = Vec::with_capacity(prompts.len() * gen_len * bank.len());
    for prompt in prompts {
        if prompt.len() + gen_len > max + 1 {
            return Err(Error::Capacity(format!(
                "prompt of {} tokens plus {gen_len} generated exceeds max_seq_len {max}",
                prompt.len()
            )));
        }
        let (mut cache, mut trace) = model.prefill(prompt)?;
        for i in 0..gen_len {
            let target = math::argmax(&trace.final_logits);
            for (k, head) in bank.heads.iter().enumerate() {
                let p = head.distribution(&trace.hidden_at_tap[k])?;
                records.push(CalibrationRecord {
                    head_index: k,
                    score: confidence(metric, &p)?,
                    correct: p.argmax() == target,
                });
            }
            if i + 1 < gen_len {
                trace = model.decode_step(&mut cache, target as Token)?;
            }
        }
    }
    Ok(records)
}

fn fraction_meets(correct: usize, total: usize, epsilon: f64) -> bool {
    correct as f64 / total as f64 >= epsilon
}

/// Threshold for one head's records (see module docs).
///
/// Records are stably sorted by score; candidate cut points are the first
/// position of each run of equal scores, so the retained suffix is exactly
/// the set of records scoring `≥ τ`.
pub fn compute_threshold(records: &[CalibrationRecord], epsilon: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Argument("no calibration records".into()));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Argument(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if let Some(r) = records.iter().find(|r| r.score.is_nan()) {
        return Err(Error::Data(format!("NaN calibration score for head {}", r.head_index)));
    }
    let mut sorted: Vec<(f64, bool)> = records.iter().map(|r| (r.score, r.correct)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let mut suffix_correct = vec![0usize; n + 1];
    for i in (0..n).rev() {
        suffix_correct[i] = suffix_correct[i + 1] + sorted[i].1 as usize;
    }
    for j in 0..n {
        if j > 0 && sorted[j - 1].0 == sorted[j].0 {
            continue;
        }
        if fraction_meets(suffix_correct[j], n - j, epsilon) {
            return Ok(sorted[j].0);
        }
    }
    Ok(f64::INFINITY)
}

/// Per-head thresholds for one `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub epsilon: f64,
    pub metric: ConfidenceMetric,
    pub calib_size: usize,
    #[serde(with = "tau_serde")]
    pub tau: Vec<f64>,
}

pub mod tau_serde {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Tau {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        let items: Vec<Tau> = v
            .iter()
            .map(|&t| {
                if t == f64::INFINITY {
                    Tau::Text("inf".into())
                } else if t == f64::NEG_INFINITY {
                    Tau::Text("-inf".into())
                } else {
                    Tau::Num(t)
                }
            })
            .collect();
        items.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        Vec::<Tau>::deserialize(d)?
            .into_iter()
            .map(|t| match t {
                Tau::Num(x) => Ok(x),
                Tau::Text(s) if s == "inf" => Ok(f64::INFINITY),
                Tau::Text(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
                Tau::Text(s) => Err(de::Error::custom(format!("bad threshold {s:?}"))),
            })
            .collect()
    }
}

impl ThresholdTable {
    /// Every head disabled.
    pub fn disabled(num_heads: usize, metric: ConfidenceMetric) -> Self {
        Self {
            epsilon: 1.0,
            metric,
            calib_size: 0,
            tau: vec![f64::INFINITY; num_heads],
        }
    }

    /// Every head always exits (testing aid).
    pub fn always_exit(num_heads: usize, metric: ConfidenceMetric) -> Self {
        Self {
            epsilon: 0.0,
            metric,
            calib_size: 0,
            tau: vec![f64::NEG_INFINITY; num_heads],
        }
    }

    pub fn num_heads(&self) -> usize {
        self.tau.len()
    }

    /// Fraction correct among `head`'s records scoring `≥ tau[head]` must be
    /// at least `epsilon` for every finite threshold. Returns the violations.
    pub fn guarantee_violations(&self, records: &[CalibrationRecord]) -> Vec<String> {
        let mut out = Vec::new();
        for (k, &t) in self.tau.iter().enumerate() {
            if !t.is_finite() {
                continue;
            }
            let above: Vec<&CalibrationRecord> = records
                .iter()
                .filter(|r| r.head_index == k && r.score >= t)
                .collect();
            let correct = above.iter().filter(|r| r.correct).count();
            if above.is_empty() || !fraction_meets(correct, above.len(), self.epsilon) {
                out.push(format!(
                    "head {k}: {correct}/{} correct at or above tau {t}, epsilon {}",
                    above.len(),
                    self.epsilon
                ));
            }
        }
        out
    }
}

/// Records for `head`, in collection order.
pub fn records_for_head(records: &[CalibrationRecord], head: usize) -> Vec<CalibrationRecord> {
    records.iter().filter(|r| r.head_index == head).copied().collect()
}

pub fn build_threshold_table(
    records: &[CalibrationRecord],
    num_heads: usize,
    epsilon: f64,
    metric: ConfidenceMetric,
) -> Result<ThresholdTable> {
    let mut tau = Vec::with_capacity(num_heads);
    let mut calib_size = usize::MAX;
    for k in 0..num_heads {
        let rk = records_for_head(records, k);
        if rk.is_empty() {
            return Err(Error::Data(format!("no calibration records for head {k}")));
        }
        calib_size = calib_size.min(rk.len());
        tau.push(compute_threshold(&rk, epsilon)?);
    }
    if let Some(r) = records.iter().find(|r| r.head_index >= num_heads) {
        return Err(Error::Data(format!(
            "record for head {} but only {num_heads} heads configured",
            r.head_index
        )));
    }
    Ok(ThresholdTable {
        epsilon,
        metric,
        calib_size: if num_heads == 0 { 0 } else { calib_size },
        tau,
    })
}

/// Writes `head_index,score,correct` rows, optionally after a `#` comment.
pub fn write_records_csv(records: &[CalibrationRecord], mut out: impl Write, preamble: Option<&str>) -> Result<()> {
    if let Some(p) = preamble {
        writeln!(out, "# {p}").map_err(|e| Error::io("<records>", e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<records>", e))?;
    Ok(())
}

/// Reads records, skipping `#` comment lines. Returns the records and the
/// text of the first comment line, if any.
pub fn read_records_csv(path: &Path) -> Result<(Vec<CalibrationRecord>, Option<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let preamble = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .map(|l| l.trim().to_string());
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let records = r
        .deserialize()
        .collect::<std::result::Result<Vec<CalibrationRecord>, _>>()?;
    Ok((records, preamble))
}
