//! Run configuration, corpus prompts and the pipeline commands behind the CLI.
//!
//! A run is one JSON document ([`RunConfig`]). Each command reads the
//! artifacts of the previous stage from `paths`, writes its own atomically and
//! stamps every output with [`FORMAT_VERSION`] and the config hash.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{self, encode, Backbone, ModelConfig, PretrainSettings, Token};
use crate::calibrate::{
    self, build_threshold_table, collect_calibration, read_records_csv, write_records_csv,
    CalibrationRecord, ConfidenceMetric, ThresholdTable, DEFAULT_CALIBRATION_PROMPTS,
};
use crate::error::{Error, Result};
use crate::format::{self, HeadsMeta};
use crate::heads::{init_heads, HeadBank, InitMode};
use crate::rng::Rng;
use crate::runtime::{self, agreement_eval_with_references, FillMode, GenerationTrace};
use crate::trainer::{self, TrainLog, TrainSettings};

pub const FORMAT_VERSION: u32 = 1;

/// Stream index used to draw the scratch head initialisation.
const HEAD_INIT_STREAM: u64 = 7;

/// Prompts drawn from the corpus. Windows start at evenly spaced word
/// boundaries inside `[start, end)` of the corpus, as fractions of its length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusPrompts {
    pub count: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub init_mode: InitMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_prompts: Option<CorpusPrompts>,
    #[serde(flatten)]
    pub settings: TrainSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            init_mode: InitMode::Scratch,
            corpus_prompts: Some(CorpusPrompts { count: 256, len: 32 }),
            settings: TrainSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub prompts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_prompts: Option<CorpusPrompts>,
    pub gen_len: usize,
    pub metric: ConfidenceMetric,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            prompts: DEFAULT_CALIBRATION_PROMPTS.iter().map(|s| s.to_string()).collect(),
            corpus_prompts: Some(CorpusPrompts { count: 64, len: 32 }),
            gen_len: 64,
            metric: ConfidenceMetric::BreakingTies,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub prompts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_prompts: Option<CorpusPrompts>,
    pub gen_len: usize,
    pub epsilon_grid: Vec<f64>,
    pub fill_mode: FillMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: Vec::new(),
            corpus_prompts: Some(CorpusPrompts { count: 50, len: 32 }),
            gen_len: 32,
            epsilon_grid: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99],
            fill_mode: FillMode::StateCopy,
        }
    }
}

/// Artifact locations. Relative paths are resolved against the directory of
/// the config file they were read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub weights: PathBuf,
    pub heads: PathBuf,
    pub train_log: PathBuf,
    pub records: PathBuf,
    pub thresholds: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: bundled_corpus_path(),
            weights: "run/backbone.brex".into(),
            heads: "run/heads.brex".into(),
            train_log: "run/train_log.csv".into(),
            records: "run/calibration.csv".into(),
            thresholds: "run/thresholds.json".into(),
            reports: "run/reports".into(),
        }
    }
}

impl PathsConfig {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.weights,
            &mut self.heads,
            &mut self.train_log,
            &mut self.records,
            &mut self.thresholds,
            &mut self.reports,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// The corpus shipped with the crate.
pub fn bundled_corpus_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/corpus.txt")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainSettings,
    pub train: TrainConfig,
    pub calib: CalibConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: PretrainSettings::default(),
            train: TrainConfig::default(),
            calib: CalibConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Individual fields a command line may override.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub init_mode: Option<InitMode>,
    pub metric: Option<ConfidenceMetric>,
    pub epsilon_grid: Option<Vec<f64>>,
    pub fill_mode: Option<FillMode>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Configuration(format!("bad config: {e}")))
    }

    /// Reads a config file and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve_against(base);
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.model.seed = seed;
            self.train.settings.seed = seed;
        }
        if let Some(l) = o.lambda {
            self.train.settings.lambda = l;
        }
        if let Some(m) = o.init_mode {
            self.train.init_mode = m;
        }
        if let Some(m) = o.metric {
            self.calib.metric = m;
        }
        if let Some(g) = &o.epsilon_grid {
            self.eval.epsilon_grid = g.clone();
        }
        if let Some(f) = o.fill_mode {
            self.eval.fill_mode = f;
        }
    }

    /// Collects every violated invariant.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut absorb = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Validation(list)) => problems.extend(list),
            Err(e) => problems.push(e.to_string()),
        };
        absorb(self.model.validate());
        absorb(self.train.settings.validate());
        let mut problems_local = Vec::new();
        if self.pretrain.steps == 0 {
            problems_local.push("pretrain.steps must be >= 1".to_string());
        }
        if self.pretrain.batch == 0 {
            problems_local.push("pretrain.batch must be >= 1".to_string());
        }
        if self.calib.gen_len == 0 {
            problems_local.push("calib.gen_len must be >= 1".to_string());
        }
        if self.eval.gen_len == 0 {
            problems_local.push("eval.gen_len must be >= 1".to_string());
        }
        let grid = &self.eval.epsilon_grid;
        if grid.iter().any(|e| !(0.0..=1.0).contains(e)) {
            problems_local.push(format!("eval.epsilon_grid values must lie in [0, 1]: {grid:?}"));
        }
        if grid.windows(2).any(|w| w[0] > w[1]) {
            problems_local.push(format!("eval.epsilon_grid must be ascending: {grid:?}"));
        }
        for (name, cp) in [
            ("train", &self.train.corpus_prompts),
            ("calib", &self.calib.corpus_prompts),
            ("eval", &self.eval.corpus_prompts),
        ] {
            if let Some(cp) = cp {
                if cp.len == 0 {
                    problems_local.push(format!("{name}.corpus_prompts.len must be >= 1"));
                }
            }
        }
        problems.extend(problems_local);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// First 16 hex digits of the SHA-256 of the config JSON, with artifact
    /// paths left out so that relocating a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig {
            corpus: PathBuf::new(),
            weights: PathBuf::new(),
            heads: PathBuf::new(),
            train_log: PathBuf::new(),
            records: PathBuf::new(),
            thresholds: PathBuf::new(),
            reports: PathBuf::new(),
        };
        let json = serde_json::to_vec(&c).expect("config serialises");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn preamble(&self, extra: &str) -> String {
        let mut p = format!("format_version={FORMAT_VERSION} config_hash={}", self.hash());
        if !extra.is_empty() {
            p.push(' ');
            p.push_str(extra);
        }
        p
    }
}

/// Reads the corpus bytes.
pub fn read_corpus(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// `shape.count` windows of `shape.len` bytes whose starts are spread evenly
/// over `[start, end)` (fractions of the corpus) and moved forward to the
/// next word start.
pub fn corpus_windows(corpus: &[u8], shape: CorpusPrompts, start: f64, end: f64) -> Result<Vec<Vec<Token>>> {
    let lo = (corpus.len() as f64 * start) as usize;
    let hi = ((corpus.len() as f64 * end) as usize).min(corpus.len());
    if shape.count == 0 {
        return Ok(Vec::new());
    }
    if hi <= lo + shape.len {
        return Err(Error::Data(format!(
            "corpus region [{lo}, {hi}) too short for {}-byte prompts",
            shape.len
        )));
    }
    let span = hi - lo - shape.len;
    let mut out = Vec::with_capacity(shape.count);
    for i in 0..shape.count {
        let mut s = lo + span * i / shape.count;
        let limit = (s + 32).min(hi - shape.len);
        while s < limit && !(s == 0 || corpus[s - 1].is_ascii_whitespace()) {
            s += 1;
        }
        while s < limit && corpus[s].is_ascii_whitespace() {
            s += 1;
        }
        out.push(corpus[s..s + shape.len].iter().map(|&b| b as Token).collect());
    }
    Ok(out)
}

/// Corpus thirds used for prompts: training, calibration, evaluation.
const TRAIN_REGION: (f64, f64) = (0.0, 1.0 / 3.0);
const CALIB_REGION: (f64, f64) = (1.0 / 3.0, 2.0 / 3.0);
const EVAL_REGION: (f64, f64) = (2.0 / 3.0, 1.0);

fn prompt_set(
    texts: &[String],
    corpus_prompts: Option<CorpusPrompts>,
    corpus_path: &Path,
    region: (f64, f64),
) -> Result<Vec<Vec<Token>>> {
    let mut prompts: Vec<Vec<Token>> = texts.iter().map(|t| encode(t)).collect();
    if let Some(cp) = corpus_prompts {
        let corpus = read_corpus(corpus_path)?;
        prompts.extend(corpus_windows(&corpus, cp, region.0, region.1)?);
    }
    if prompts.is_empty() {
        return Err(Error::Argument("prompt set is empty".into()));
    }
    Ok(prompts)
}

pub fn train_prompts(cfg: &RunConfig) -> Result<Vec<Vec<Token>>> {
    prompt_set(&cfg.train.settings.batch_prompts, cfg.train.corpus_prompts, &cfg.paths.corpus, TRAIN_REGION)
}

pub fn calibration_prompts(cfg: &RunConfig) -> Result<Vec<Vec<Token>>> {
    prompt_set(&cfg.calib.prompts, cfg.calib.corpus_prompts, &cfg.paths.corpus, CALIB_REGION)
}

pub fn eval_prompts(cfg: &RunConfig) -> Result<Vec<Vec<Token>>> {
    prompt_set(&cfg.eval.prompts, cfg.eval.corpus_prompts, &cfg.paths.corpus, EVAL_REGION)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    format::write_atomic(path, &bytes)
}

/// Progress messages from long-running commands.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub weights: PathBuf,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

pub fn cmd_pretrain(cfg: &RunConfig, progress: Progress) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let corpus = read_corpus(&cfg.paths.corpus)?;
    let every = (cfg.pretrain.steps / 20).max(1);
    let (model, log) = backbone::pretrain_with_progress(&corpus, &cfg.model, &cfg.pretrain, |step, loss| {
        if step % every == 0 || step + 1 == cfg.pretrain.steps {
            progress(&format!("pretrain step {step}: loss {loss:.4}"));
        }
    })?;
    format::save_backbone(&cfg.paths.weights, &model, Some(&cfg.hash()))?;
    Ok(PretrainOutcome {
        weights: cfg.paths.weights.clone(),
        final_loss: *log.losses.last().expect("at least one step"),
        losses: log.losses,
    })
}

pub fn load_backbone(cfg: &RunConfig) -> Result<Backbone> {
    let (model, _) = format::load_backbone(&cfg.paths.weights)?;
    if model.config != cfg.model {
        return Err(Error::Configuration(format!(
            "{} holds a model whose config differs from the run config",
            cfg.paths.weights.display()
        )));
    }
    Ok(model)
}

pub fn load_trained(cfg: &RunConfig) -> Result<(Backbone, HeadBank)> {
    let model = load_backbone(cfg)?;
    let (bank, _) = format::load_heads(&cfg.paths.heads, &model)?;
    Ok((model, bank))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub heads: PathBuf,
    pub train_log: PathBuf,
    pub log: TrainLog,
}

pub fn cmd_train_heads(cfg: &RunConfig, progress: Progress) -> Result<TrainOutcome> {
    cfg.validate()?;
    require(&cfg.paths.weights)?;
    let model = load_backbone(cfg)?;
    let prompts = train_prompts(cfg)?;
    let s = &cfg.train.settings;
    let bank = init_heads(&model, cfg.train.init_mode, &mut Rng::child(s.seed, HEAD_INIT_STREAM));
    let every = (s.steps / 20).max(1);
    let (bank, log) = trainer::train_heads_on_prompts(&model, &bank, s, prompts, &mut |rows| {
        let step = rows[0].step;
        if step % every == 0 || step + 1 == s.steps {
            let parts: Vec<String> = rows
                .iter()
                .map(|r| format!("h{} acc {:.3} H {:.3}", r.head_index, r.accuracy, r.entropy))
                .collect();
            progress(&format!("train step {step}: {}", parts.join(", ")));
        }
    })?;
    let meta = HeadsMeta {
        init_mode: cfg.train.init_mode,
        lambda: s.lambda,
        steps: s.steps,
        seed: s.seed,
    };
    format::save_heads(&cfg.paths.heads, &model.config, &bank, &meta, Some(&cfg.hash()))?;
    let mut csv = Vec::new();
    log.write_csv(
        &mut csv,
        Some(&cfg.preamble(&format!("lambda={} init_mode={}", s.lambda, cfg.train.init_mode))),
    )?;
    format::write_atomic(&cfg.paths.train_log, &csv)?;
    Ok(TrainOutcome {
        heads: cfg.paths.heads.clone(),
        train_log: cfg.paths.train_log.clone(),
        log,
    })
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<Vec<CalibrationRecord>> {
    cfg.validate()?;
    require(&cfg.paths.weights)?;
    require(&cfg.paths.heads)?;
    let (model, bank) = load_trained(cfg)?;
    let prompts = calibration_prompts(cfg)?;
    let records = collect_calibration(&model, &bank, &prompts, cfg.calib.gen_len, cfg.calib.metric)?;
    let mut csv = Vec::new();
    write_records_csv(&records, &mut csv, Some(&cfg.preamble(&format!("metric={}", cfg.calib.metric.name()))))?;
    format::write_atomic(&cfg.paths.records, &csv)?;
    Ok(records)
}

/// Metric recorded in a records file's comment line.
fn records_metric(preamble: Option<&str>) -> Option<ConfidenceMetric> {
    preamble?
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("metric="))
        .and_then(|m| m.parse().ok())
}

pub fn load_records(cfg: &RunConfig) -> Result<Vec<CalibrationRecord>> {
    require(&cfg.paths.records)?;
    let (records, preamble) = read_records_csv(&cfg.paths.records)?;
    if let Some(m) = records_metric(preamble.as_deref()) {
        if m != cfg.calib.metric {
            return Err(Error::Configuration(format!(
                "{} was collected with metric {}, config asks for {}",
                cfg.paths.records.display(),
                m.name(),
                cfg.calib.metric.name()
            )));
        }
    }
    Ok(records)
}

/// Threshold table as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub format_version: u32,
    pub config_hash: String,
    #[serde(flatten)]
    pub table: ThresholdTable,
}

/// Builds thresholds and refuses to write them if the calibration guarantee
/// fails on the records they came from.
pub fn thresholds_checked(
    records: &[CalibrationRecord],
    num_heads: usize,
    epsilon: f64,
    metric: ConfidenceMetric,
) -> Result<ThresholdTable> {
    let table = build_threshold_table(records, num_heads, epsilon, metric)?;
    let violations = table.guarantee_violations(records);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(table)
}

pub fn cmd_thresholds(cfg: &RunConfig, epsilon: f64) -> Result<ThresholdTable> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Validation(vec![format!("epsilon {epsilon} outside [0, 1]")]));
    }
    let records = load_records(cfg)?;
    let table = thresholds_checked(&records, cfg.model.exit_taps.len(), epsilon, cfg.calib.metric)?;
    write_json(
        &cfg.paths.thresholds,
        &ThresholdFile {
            format_version: FORMAT_VERSION,
            config_hash: cfg.hash(),
            table: table.clone(),
        },
    )?;
    Ok(table)
}

pub fn load_thresholds(path: &Path) -> Result<ThresholdTable> {
    require(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ThresholdFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(file.table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub format_version: u32,
    pub config_hash: String,
    pub epsilon: f64,
    pub text: String,
    #[serde(flatten)]
    pub trace: GenerationTrace,
}

pub fn cmd_generate(
    cfg: &RunConfig,
    prompt: &str,
    max_tokens: usize,
    out: Option<&Path>,
) -> Result<(GenerationTrace, f64)> {
    cfg.validate()?;
    let (model, bank) = load_trained(cfg)?;
    let table = load_thresholds(&cfg.paths.thresholds)?;
    let started = Instant::now();
    let trace = runtime::generate(&model, &bank, &table, &encode(prompt), max_tokens, cfg.eval.fill_mode)?;
    let seconds = started.elapsed().as_secs_f64();
    if let Some(out) = out {
        write_json(
            out,
            &TraceFile {
                format_version: FORMAT_VERSION,
                config_hash: cfg.hash(),
                epsilon: table.epsilon,
                text: trace.output_text(),
                trace: trace.clone(),
            },
        )?;
    }
    Ok((trace, seconds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    #[serde(with = "calibrate::tau_serde")]
    pub tau: Vec<f64>,
    pub agreement: f64,
    pub speedup: f64,
    pub effective_speedup: f64,
    pub mean_blocks_per_token: f64,
    /// One entry per head, then the final layer.
    pub exit_fractions: Vec<f64>,
    pub exit_precision: Vec<Option<f64>>,
}

impl SweepRow {
    /// Expected exit depth in blocks.
    pub fn mean_exit_depth(&self) -> f64 {
        self.mean_blocks_per_token
    }
}

/// Wall-clock information; excluded from determinism comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub created_unix_secs: u64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub metric: ConfidenceMetric,
    pub fill_mode: FillMode,
    pub exit_taps: Vec<usize>,
    pub n_layers: usize,
    pub calib_records: usize,
    pub eval_prompts: usize,
    pub eval_positions: usize,
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metadata: SweepMetadata,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Flat table: `epsilon, agreement, speedup, exit_frac_head1..K, final_frac`.
    pub fn to_csv(&self) -> String {
        let k = self.metadata.exit_taps.len();
        let mut out = format!(
            "# format_version={} config_hash={} metric={} fill_mode={}\n",
            self.metadata.format_version,
            self.metadata.config_hash,
            self.metadata.metric.name(),
            self.metadata.fill_mode
        );
        let mut header = vec!["epsilon".to_string(), "agreement".into(), "speedup".into()];
        header.extend((1..=k).map(|i| format!("exit_frac_head{i}")));
        header.push("final_frac".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![r.epsilon.to_string(), r.agreement.to_string(), r.speedup.to_string()];
            cells.extend(r.exit_fractions.iter().map(|f| f.to_string()));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn sweep_json_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.reports.join("sweep.json")
}

pub fn sweep_csv_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.reports.join("sweep.csv")
}

/// Runs the ε sweep with already loaded artifacts; writes nothing.
pub fn sweep(
    cfg: &RunConfig,
    model: &Backbone,
    bank: &HeadBank,
    records: &[CalibrationRecord],
    prompts: &[Vec<Token>],
    progress: Progress,
) -> Result<SweepReport> {
    let grid = &cfg.eval.epsilon_grid;
    if grid.is_empty() {
        return Err(Error::Validation(vec!["eval.epsilon_grid is empty".into()]));
    }
    let started = Instant::now();
    let references = prompts
        .iter()
        .map(|p| model.greedy_generate(p, cfg.eval.gen_len))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(grid.len());
    let mut positions = 0;
    for &eps in grid {
        let table = thresholds_checked(records, bank.len(), eps, cfg.calib.metric)?;
        let r = agreement_eval_with_references(model, bank, &table, prompts, &references, cfg.eval.fill_mode)?;
        progress(&format!(
            "epsilon {eps}: agreement {:.4}, speedup {:.3}, exits {:?}",
            r.agreement, r.totals.speedup, r.exit_fractions
        ));
        positions = r.positions;
        rows.push(SweepRow {
            epsilon: eps,
            tau: table.tau,
            agreement: r.agreement,
            speedup: r.totals.speedup,
            effective_speedup: r.totals.effective_speedup,
            mean_blocks_per_token: r.mean_blocks_per_token,
            exit_fractions: r.exit_fractions,
            exit_precision: r.exit_precision,
        });
    }
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(SweepReport {
        metadata: SweepMetadata {
            format_version: FORMAT_VERSION,
            config_hash: cfg.hash(),
            seed: cfg.model.seed,
            metric: cfg.calib.metric,
            fill_mode: cfg.eval.fill_mode,
            exit_taps: cfg.model.exit_taps.clone(),
            n_layers: cfg.model.n_layers,
            calib_records: records.len(),
            eval_prompts: prompts.len(),
            eval_positions: positions,
            timing: Timing {
                created_unix_secs: created,
                wall_clock_secs: started.elapsed().as_secs_f64(),
            },
        },
        rows,
    })
}

pub fn cmd_sweep(cfg: &RunConfig, progress: Progress) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.eval.epsilon_grid.is_empty() {
        return Err(Error::Validation(vec!["eval.epsilon_grid is empty".into()]));
    }
    require(&cfg.paths.weights)?;
    require(&cfg.paths.heads)?;
    let (model, bank) = load_trained(cfg)?;
    let records = load_records(cfg)?;
    let prompts = eval_prompts(cfg)?;
    let report = sweep(cfg, &model, &bank, &records, &prompts, progress)?;
    write_json(&sweep_json_path(cfg), &report)?;
    format::write_atomic(&sweep_csv_path(cfg), report.to_csv().as_bytes())?;
    Ok(report)
}
