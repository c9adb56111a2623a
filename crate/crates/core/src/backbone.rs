//! The frozen main model: a small pre-norm decoder-only transformer.
//!
//! Blocks are `x + Attn(LN₁(x))` followed by `x + FFN(LN₂(x))` with GELU,
//! learned absolute position embeddings and an untied output projection.
//! Two forward paths exist:
//!
//! * a whole-sequence path used by pretraining (with manual backprop) and
//!   evaluation, and
//! * an incremental path over a [`KvCache`] used by every decoding loop.
//!
//! Both paths share the same row kernels and reduction order, so the hidden
//! state of a position is the same whichever path produced it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, argmax, dot, matmul, matmul_nt, matmul_tn, vec_mat, Matrix, ProbVector};
use crate::optim::Adam;
use crate::rng::Rng;

/// Token id. The reference configuration is byte-level (`vocab_size = 256`).
pub type Token = u32;

pub const LN_EPS: f32 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters and exit-tap placement.
///
/// `exit_taps` are 1-based block indices: tap `t` reads the output of block
/// `t` (after its residual additions).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_attn_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub exit_taps: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 8,
            n_attn_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            exit_taps: vec![2, 4, 6],
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Returns every violated invariant at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vocab_size < 2 {
            problems.push(format!("vocab_size must be >= 2 (got {})", self.vocab_size));
        }
        if self.d_model == 0 || self.n_attn_heads == 0 || self.d_model % self.n_attn_heads != 0 {
            problems.push(format!(
                "d_model ({}) must be a positive multiple of n_attn_heads ({})",
                self.d_model, self.n_attn_heads
            ));
        }
        if self.n_layers < 2 {
            problems.push(format!("n_layers must be >= 2 (got {})", self.n_layers));
        }
        if self.d_ff == 0 {
            problems.push("d_ff must be positive".into());
        }
        if self.max_seq_len == 0 {
            problems.push("max_seq_len must be positive".into());
        }
        if self.exit_taps.windows(2).any(|w| w[0] >= w[1]) {
            problems.push(format!(
                "exit_taps must be strictly ascending (got {:?})",
                self.exit_taps
            ));
        }
        if let Some(t) = self
            .exit_taps
            .iter()
            .find(|&&t| t == 0 || t >= self.n_layers)
        {
            problems.push(format!(
                "exit tap {t} outside [1, {}]",
                self.n_layers.saturating_sub(1)
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_attn_heads
    }

    pub fn num_exits(&self) -> usize {
        self.exit_taps.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gain: vec![0.0; d],
            bias: vec![0.0; d],
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.gain.len());
        let (mean, rstd) = math::moments(x, LN_EPS);
        x.iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(&v, (&g, &b))| (((v as f64 - mean) * rstd) as f32) * g + b)
            .collect()
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2: LayerNorm,
    pub w_ff1: Matrix,
    pub b_ff1: Vec<f32>,
    pub w_ff2: Matrix,
    pub b_ff2: Vec<f32>,
}

impl Block {
    fn zeros(c: &ModelConfig) -> Self {
        let d = c.d_model;
        Self {
            ln1: LayerNorm::zeros(d),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            w_ff1: Matrix::zeros(d, c.d_ff),
            b_ff1: vec![0.0; c.d_ff],
            w_ff2: Matrix::zeros(c.d_ff, d),
            b_ff2: vec![0.0; d],
        }
    }

    fn tensors(&self) -> [&[f32]; 12] {
        [
            &self.ln1.gain,
            &self.ln1.bias,
            self.w_q.data(),
            self.w_k.data(),
            self.w_v.data(),
            self.w_o.data(),
            &self.ln2.gain,
            &self.ln2.bias,
            self.w_ff1.data(),
            &self.b_ff1,
            self.w_ff2.data(),
            &self.b_ff2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f32]; 12] {
        [
            &mut self.ln1.gain,
            &mut self.ln1.bias,
            self.w_q.data_mut(),
            self.w_k.data_mut(),
            self.w_v.data_mut(),
            self.w_o.data_mut(),
            &mut self.ln2.gain,
            &mut self.ln2.bias,
            self.w_ff1.data_mut(),
            &mut self.b_ff1,
            self.w_ff2.data_mut(),
            &mut self.b_ff2,
        ]
    }
}

/// Hidden states and logits for the last position of a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Entry `k` is the output of block `exit_taps[k]`.
    pub hidden_at_tap: Vec<Vec<f32>>,
    /// Output of the last block, before the final norm.
    pub final_hidden: Vec<f32>,
    pub final_logits: Vec<f32>,
    /// Output of every block, only populated in evaluation mode.
    pub per_block_hidden: Option<Vec<Vec<f32>>>,
}

/// Keys and values of one layer, one row per processed position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerKv {
    keys: Vec<f32>,
    values: Vec<f32>,
    len: usize,
}

impl LayerKv {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, key: &[f32], value: &[f32]) {
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.len += 1;
    }

    pub fn key(&self, pos: usize, d: usize) -> &[f32] {
        &self.keys[pos * d..(pos + 1) * d]
    }

    pub fn value(&self, pos: usize, d: usize) -> &[f32] {
        &self.values[pos * d..(pos + 1) * d]
    }
}

/// Per-layer attention state for incremental decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerKv::default(); n_layers],
        }
    }

    /// Number of positions held by layer 0.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoder-only transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub lm_head: Matrix,
}

fn gelu(x: f32) -> f32 {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let x = x as f64;
    (0.5 * x * (1.0 + (A * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn gelu_grad(x: f32) -> f32 {
    const A: f64 = 0.797_884_560_802_865_4;
    let x = x as f64;
    let t = (A * (x + 0.044715 * x * x * x)).tanh();
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * A * (1.0 + 3.0 * 0.044715 * x * x)) as f32
}

/// Causal attention for one query row over `n` cached key/value rows.
///
/// `probs`, when given, receives `n_heads × n` attention weights.
fn attend_row(
    q: &[f32],
    kv: &LayerKv,
    n: usize,
    n_heads: usize,
    mut probs: Option<&mut [f32]>,
) -> Vec<f32> {
    let d = q.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0f32; d];
    let mut scores = vec![0f64; n];
    let mut acc = vec![0f64; dh];
    for h in 0..n_heads {
        let lo = h * dh;
        let hi = lo + dh;
        let qh = &q[lo..hi];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qh, &kv.key(j, d)[lo..hi]) * scale;
            max = max.max(*s);
        }
        let mut sum = 0f64;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, s) in scores.iter_mut().enumerate() {
            *s /= sum;
            let vj = &kv.value(j, d)[lo..hi];
            for (a, &v) in acc.iter_mut().zip(vj) {
                *a += *s * v as f64;
            }
        }
        if let Some(p) = probs.as_deref_mut() {
            for (dst, &s) in p[h * n..(h + 1) * n].iter_mut().zip(&scores) {
                *dst = s as f32;
            }
        }
        for (o, a) in out[lo..hi].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    out
}

fn add_bias(xs: &mut [f32], bias: &[f32]) {
    for (x, b) in xs.iter_mut().zip(bias) {
        *x += b;
    }
}

fn add_assign(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

fn ln_rows(ln: &LayerNorm, x: &Matrix) -> (Matrix, LnCache) {
    let (t, d) = x.shape();
    let mut out = Matrix::zeros(t, d);
    let mut xhat = Matrix::zeros(t, d);
    let mut rstds = Vec::with_capacity(t);
    for r in 0..t {
        let row = x.row(r);
        let (mean, rstd) = math::moments(row, LN_EPS);
        rstds.push(rstd);
        let xh = xhat.row_mut(r);
        for (i, &v) in row.iter().enumerate() {
            xh[i] = ((v as f64 - mean) * rstd) as f32;
        }
        let o = out.row_mut(r);
        for i in 0..d {
            o[i] = xhat.get(r, i) * ln.gain[i] + ln.bias[i];
        }
    }
    (out, LnCache { xhat, rstd: rstds })
}

/// Returns dL/dx and accumulates gain/bias gradients.
fn ln_backward(ln: &LayerNorm, cache: &LnCache, dy: &Matrix, grad: &mut LayerNorm) -> Matrix {
    let (t, d) = dy.shape();
    let mut dx = Matrix::zeros(t, d);
    let n = d as f64;
    for r in 0..t {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxhat = 0f64;
        let mut mean_dxhat_xhat = 0f64;
        for i in 0..d {
            let dxhat = dyr[i] as f64 * ln.gain[i] as f64;
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xh[i] as f64;
            grad.gain[i] += dyr[i] * xh[i];
            grad.bias[i] += dyr[i];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let rstd = cache.rstd[r];
        let out = dx.row_mut(r);
        for i in 0..d {
            let dxhat = dyr[i] as f64 * ln.gain[i] as f64;
            out[i] = (rstd * (dxhat - mean_dxhat - xh[i] as f64 * mean_dxhat_xhat)) as f32;
        }
    }
    dx
}

struct BlockCache {
    h1: Matrix,
    ln1: LnCache,
    q: Matrix,
    kv: LayerKv,
    probs: Vec<Vec<f32>>,
    att: Matrix,
    h2: Matrix,
    ln2: LnCache,
    ff_pre: Matrix,
    ff_act: Matrix,
}

struct SeqForward {
    block_outputs: Vec<Matrix>,
    caches: Vec<BlockCache>,
    final_ln: LnCache,
    final_h: Matrix,
    logits: Matrix,
}

/// Loss and per-tensor gradients for one batch.
pub struct Gradients {
    pub loss: f64,
    pub grads: Backbone,
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    /// Training window length; defaults to `max_seq_len`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 3e-3,
            batch: 8,
            window: Some(64),
        }
    }
}

/// Per-step training loss of [`pretrain`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainLog {
    pub losses: Vec<f64>,
}

impl Backbone {
    /// Random initialisation: N(0, 0.02²) for embeddings and projections,
    /// residual output projections scaled by 1/sqrt(2·n_layers), unit norms.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut model = Self::zeroed(&config);
        model.config = config;
        let resid_std = INIT_STD / (2.0 * model.config.n_layers as f64).sqrt();
        let mut fill = |m: &mut [f32], std: f64| {
            m.iter_mut().for_each(|v| *v = rng.normal(0.0, std) as f32)
        };
        fill(model.token_embedding.data_mut(), INIT_STD);
        fill(model.position_embedding.data_mut(), INIT_STD);
        for b in &mut model.blocks {
            b.ln1 = LayerNorm::identity(b.ln1.gain.len());
            b.ln2 = LayerNorm::identity(b.ln2.gain.len());
            fill(b.w_q.data_mut(), INIT_STD);
            fill(b.w_k.data_mut(), INIT_STD);
            fill(b.w_v.data_mut(), INIT_STD);
            fill(b.w_o.data_mut(), resid_std);
            fill(b.w_ff1.data_mut(), INIT_STD);
            fill(b.w_ff2.data_mut(), resid_std);
        }
        model.final_norm = LayerNorm::identity(model.config.d_model);
        fill(model.lm_head.data_mut(), INIT_STD);
        Ok(model)
    }

    /// All-zero parameters with shapes taken from `config` (gradient buffers).
    pub fn zeroed(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            config: config.clone(),
            token_embedding: Matrix::zeros(config.vocab_size, d),
            position_embedding: Matrix::zeros(config.max_seq_len, d),
            blocks: (0..config.n_layers).map(|_| Block::zeros(config)).collect(),
            final_norm: LayerNorm::zeros(d),
            lm_head: Matrix::zeros(d, config.vocab_size),
        }
    }

    /// Parameter tensors in serialisation order: token embedding, position
    /// embedding, each block (ln1 gain/bias, q, k, v, o, ln2 gain/bias, ff1
    /// weight/bias, ff2 weight/bias), final norm gain/bias, lm head.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.token_embedding.data(), self.position_embedding.data()];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.final_norm.gain);
        out.push(&self.final_norm.bias);
        out.push(self.lm_head.data());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![
            self.token_embedding.data_mut(),
            self.position_embedding.data_mut(),
        ];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out.push(self.lm_head.data_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Argument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Argument(format!(
                "token {t} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Incremental path

    /// Token plus position embedding for `token` at `pos`.
    pub fn embed(&self, token: Token, pos: usize) -> Result<Vec<f32>> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::Argument(format!(
                "token {token} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        if pos >= self.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "position {pos} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let mut x = self.token_embedding.row(token as usize).to_vec();
        add_assign(&mut x, self.position_embedding.row(pos));
        Ok(x)
    }

    /// Runs block `layer` (0-based) for one position, appending its key and
    /// value to `kv`.
    pub fn block_step(&self, layer: usize, x: &[f32], kv: &mut LayerKv) -> Vec<f32> {
        let b = &self.blocks[layer];
        let h1 = b.ln1.apply(x);
        let q = vec_mat(&h1, &b.w_q).expect("shape");
        let k = vec_mat(&h1, &b.w_k).expect("shape");
        let v = vec_mat(&h1, &b.w_v).expect("shape");
        kv.push(&k, &v);
        let att = attend_row(&q, kv, kv.len(), self.config.n_attn_heads, None);
        let proj = vec_mat(&att, &b.w_o).expect("shape");
        let mut mid = x.to_vec();
        add_assign(&mut mid, &proj);
        self.feed_forward(b, mid)
    }

    fn feed_forward(&self, b: &Block, mut mid: Vec<f32>) -> Vec<f32> {
        let h2 = b.ln2.apply(&mid);
        let mut pre = vec_mat(&h2, &b.w_ff1).expect("shape");
        add_bias(&mut pre, &b.b_ff1);
        let act: Vec<f32> = pre.iter().map(|&v| gelu(v)).collect();
        let mut ff = vec_mat(&act, &b.w_ff2).expect("shape");
        add_bias(&mut ff, &b.b_ff2);
        add_assign(&mut mid, &ff);
        mid
    }

    /// Key and value that block `layer` would derive from input `x`, without
    /// running the block.
    pub fn kv_projection(&self, layer: usize, x: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let b = &self.blocks[layer];
        let h1 = b.ln1.apply(x);
        (
            vec_mat(&h1, &b.w_k).expect("shape"),
            vec_mat(&h1, &b.w_v).expect("shape"),
        )
    }

    /// Final norm and output projection.
    pub fn logits_from_hidden(&self, x: &[f32]) -> Vec<f32> {
        vec_mat(&self.final_norm.apply(x), &self.lm_head).expect("shape")
    }

    /// Full-depth pass for `token` at position `cache.len()`.
    pub fn decode_step(&self, cache: &mut KvCache, token: Token) -> Result<ForwardTrace> {
        let mut x = self.embed(token, cache.len())?;
        let mut taps = Vec::with_capacity(self.config.num_exits());
        let mut next_tap = 0;
        for layer in 0..self.config.n_layers {
            x = self.block_step(layer, &x, &mut cache.layers[layer]);
            if self.config.exit_taps.get(next_tap) == Some(&(layer + 1)) {
                taps.push(x.clone());
                next_tap += 1;
            }
        }
        Ok(ForwardTrace {
            hidden_at_tap: taps,
            final_logits: self.logits_from_hidden(&x),
            final_hidden: x,
            per_block_hidden: None,
        })
    }

    /// Feeds `tokens` through a fresh cache and returns the trace of the last.
    pub fn prefill(&self, tokens: &[Token]) -> Result<(KvCache, ForwardTrace)> {
        self.check_tokens(tokens)?;
        let mut cache = KvCache::new(self.config.n_layers);
        let mut last = None;
        for &t in tokens {
            last = Some(self.decode_step(&mut cache, t)?);
        }
        Ok((cache, last.expect("non-empty")))
    }

    /// Greedy continuation of `prompt` by `n` tokens.
    pub fn greedy_generate(&self, prompt: &[Token], n: usize) -> Result<Vec<Token>> {
        if prompt.len() + n > self.config.max_seq_len + 1 {
            return Err(Error::Capacity(format!(
                "prompt of {} tokens plus {n} generated exceeds max_seq_len {}",
                prompt.len(),
                self.config.max_seq_len
            )));
        }
        let (mut cache, mut trace) = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let next = argmax(&trace.final_logits) as Token;
            out.push(next);
            if i + 1 < n {
                trace = self.decode_step(&mut cache, next)?;
            }
        }
        Ok(out)
    }

    // ---------------------------------------------------------------------
    // Whole-sequence path

    fn forward_seq(&self, tokens: &[Token]) -> SeqForward {
        let c = &self.config;
        let t_len = tokens.len();
        let d = c.d_model;
        let mut x = Matrix::zeros(t_len, d);
        for (p, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(p);
            row.copy_from_slice(self.token_embedding.row(tok as usize));
            add_assign(row, self.position_embedding.row(p));
        }
        let mut block_outputs = Vec::with_capacity(c.n_layers);
        let mut caches = Vec::with_capacity(c.n_layers);
        for b in &self.blocks {
            let (h1, ln1) = ln_rows(&b.ln1, &x);
            let q = matmul(&h1, &b.w_q).expect("shape");
            let k = matmul(&h1, &b.w_k).expect("shape");
            let v = matmul(&h1, &b.w_v).expect("shape");
            let mut kv = LayerKv::default();
            let mut att = Matrix::zeros(t_len, d);
            let mut probs = Vec::with_capacity(t_len);
            for p in 0..t_len {
                kv.push(k.row(p), v.row(p));
                let mut pr = vec![0f32; c.n_attn_heads * (p + 1)];
                let out = attend_row(q.row(p), &kv, p + 1, c.n_attn_heads, Some(&mut pr));
                att.row_mut(p).copy_from_slice(&out);
                probs.push(pr);
            }
            let proj = matmul(&att, &b.w_o).expect("shape");
            let mut mid = x.clone();
            add_assign(mid.data_mut(), proj.data());
            let (h2, ln2) = ln_rows(&b.ln2, &mid);
            let mut ff_pre = matmul(&h2, &b.w_ff1).expect("shape");
            for r in 0..t_len {
                add_bias(ff_pre.row_mut(r), &b.b_ff1);
            }
            let mut ff_act = ff_pre.clone();
            ff_act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
            let mut ff = matmul(&ff_act, &b.w_ff2).expect("shape");
            for r in 0..t_len {
                add_bias(ff.row_mut(r), &b.b_ff2);
            }
            add_assign(mid.data_mut(), ff.data());
            x = mid;
            block_outputs.push(x.clone());
            caches.push(BlockCache {
                h1,
                ln1,
                q,
                kv,
                probs,
                att,
                h2,
                ln2,
                ff_pre,
                ff_act,
            });
        }
        let (final_h, final_ln) = ln_rows(&self.final_norm, &x);
        let logits = matmul(&final_h, &self.lm_head).expect("shape");
        SeqForward {
            block_outputs,
            caches,
            final_ln,
            final_h,
            logits,
        }
    }

    /// Causal pass over `tokens`; taps and logits refer to the last position.
    pub fn forward_full(&self, tokens: &[Token]) -> Result<ForwardTrace> {
        self.forward_eval(tokens, false)
    }

    /// Like [`forward_full`](Self::forward_full), optionally recording every
    /// block's output at the last position.
    pub fn forward_eval(&self, tokens: &[Token], record_blocks: bool) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let fwd = self.forward_seq(tokens);
        let last = tokens.len() - 1;
        let taps = self
            .config
            .exit_taps
            .iter()
            .map(|&t| fwd.block_outputs[t - 1].row(last).to_vec())
            .collect();
        let per_block = record_blocks.then(|| {
            fwd.block_outputs
                .iter()
                .map(|m| m.row(last).to_vec())
                .collect()
        });
        Ok(ForwardTrace {
            hidden_at_tap: taps,
            final_hidden: fwd.block_outputs[self.config.n_layers - 1].row(last).to_vec(),
            final_logits: fwd.logits.row(last).to_vec(),
            per_block_hidden: per_block,
        })
    }

    /// Logits for every position (evaluation mode).
    pub fn sequence_logits(&self, tokens: &[Token]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        Ok(self.forward_seq(tokens).logits)
    }

    /// `p_θ`: softmax of the final logits at the last position.
    pub fn next_token_distribution(&self, tokens: &[Token]) -> Result<ProbVector> {
        math::softmax(&self.forward_full(tokens)?.final_logits)
    }

    /// Mean next-token cross-entropy over `windows` (each of length ≥ 2; the
    /// last token of a window is only a target) and its gradient.
    pub fn loss_and_grad(&self, windows: &[&[Token]]) -> Result<Gradients> {
        let mut grads = Self::zeroed(&self.config);
        let total: usize = windows.iter().map(|w| w.len().saturating_sub(1)).sum();
        if total == 0 {
            return Err(Error::Argument("no prediction targets in batch".into()));
        }
        let mut loss = 0f64;
        for w in windows {
            let (inputs, targets) = (&w[..w.len() - 1], &w[1..]);
            self.check_tokens(inputs)?;
            loss += self.backward_window(inputs, targets, total as f64, &mut grads);
        }
        Ok(Gradients {
            loss: loss / total as f64,
            grads,
        })
    }

    /// Mean next-token cross-entropy without gradients.
    pub fn loss(&self, windows: &[&[Token]]) -> Result<f64> {
        let mut total = 0usize;
        let mut loss = 0f64;
        for w in windows {
            let (inputs, targets) = (&w[..w.len() - 1], &w[1..]);
            self.check_tokens(inputs)?;
            let fwd = self.forward_seq(inputs);
            for (p, &tgt) in targets.iter().enumerate() {
                loss -= math::log_softmax_f64(fwd.logits.row(p))[tgt as usize];
            }
            total += targets.len();
        }
        Ok(loss / total as f64)
    }

    /// Accumulates `∂(Σ CE)/norm` into `grads`; returns the summed CE.
    fn backward_window(&self, inputs: &[Token], targets: &[Token], norm: f64, grads: &mut Backbone) -> f64 {
        let c = &self.config;
        let t_len = inputs.len();
        let d = c.d_model;
        let n_heads = c.n_attn_heads;
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let fwd = self.forward_seq(inputs);

        let mut loss = 0f64;
        let mut dlogits = Matrix::zeros(t_len, c.vocab_size);
        for p in 0..t_len {
            let probs = math::softmax_f64(fwd.logits.row(p));
            let tgt = targets[p] as usize;
            loss -= probs[tgt].max(math::PROB_FLOOR).ln();
            let row = dlogits.row_mut(p);
            for (i, pr) in probs.iter().enumerate() {
                let g = pr - if i == tgt { 1.0 } else { 0.0 };
                row[i] = (g / norm) as f32;
            }
        }

        add_assign(grads.lm_head.data_mut(), matmul_tn(&fwd.final_h, &dlogits).expect("shape").data());
        let d_final_h = matmul_nt(&dlogits, &self.lm_head).expect("shape");
        let mut dx = ln_backward(&self.final_norm, &fwd.final_ln, &d_final_h, &mut grads.final_norm);

        for layer in (0..c.n_layers).rev() {
            let b = &self.blocks[layer];
            let cache = &fwd.caches[layer];
            let g = &mut grads.blocks[layer];

            // Feed-forward branch.
            let d_ff = &dx;
            let mut db2 = vec![0f32; d];
            for r in 0..t_len {
                add_assign(&mut db2, d_ff.row(r));
            }
            add_assign(&mut g.b_ff2, &db2);
            add_assign(g.w_ff2.data_mut(), matmul_tn(&cache.ff_act, d_ff).expect("shape").data());
            let mut d_pre = matmul_nt(d_ff, &b.w_ff2).expect("shape");
            for (dv, &pre) in d_pre.data_mut().iter_mut().zip(cache.ff_pre.data()) {
                *dv *= gelu_grad(pre);
            }
            let mut db1 = vec![0f32; c.d_ff];
            for r in 0..t_len {
                add_assign(&mut db1, d_pre.row(r));
            }
            add_assign(&mut g.b_ff1, &db1);
            add_assign(g.w_ff1.data_mut(), matmul_tn(&cache.h2, &d_pre).expect("shape").data());
            let d_h2 = matmul_nt(&d_pre, &b.w_ff1).expect("shape");
            let d_mid_ln = ln_backward(&b.ln2, &cache.ln2, &d_h2, &mut g.ln2);
            let mut d_mid = dx.clone();
            add_assign(d_mid.data_mut(), d_mid_ln.data());

            // Attention branch.
            add_assign(g.w_o.data_mut(), matmul_tn(&cache.att, &d_mid).expect("shape").data());
            let d_att = matmul_nt(&d_mid, &b.w_o).expect("shape");
            let mut dq = vec![0f64; t_len * d];
            let mut dk = vec![0f64; t_len * d];
            let mut dv = vec![0f64; t_len * d];
            let mut dp = Vec::with_capacity(t_len);
            for i in 0..t_len {
                let n = i + 1;
                let probs = &cache.probs[i];
                let d_out = d_att.row(i);
                let q_i = cache.q.row(i);
                for h in 0..n_heads {
                    let lo = h * dh;
                    let hi = lo + dh;
                    let p = &probs[h * n..(h + 1) * n];
                    dp.clear();
                    let mut weighted = 0f64;
                    for j in 0..n {
                        let v_j = &cache.kv.value(j, d)[lo..hi];
                        let g_pj = dot(&d_out[lo..hi], v_j);
                        weighted += p[j] as f64 * g_pj;
                        dp.push(g_pj);
                        let pj = p[j] as f64;
                        for (acc, &go) in dv[j * d + lo..j * d + hi].iter_mut().zip(&d_out[lo..hi]) {
                            *acc += pj * go as f64;
                        }
                    }
                    for j in 0..n {
                        let ds = p[j] as f64 * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let k_j = &cache.kv.key(j, d)[lo..hi];
                        for (acc, &kv) in dq[i * d + lo..i * d + hi].iter_mut().zip(k_j) {
                            *acc += ds * kv as f64;
                        }
                        for (acc, &qv) in dk[j * d + lo..j * d + hi].iter_mut().zip(&q_i[lo..hi]) {
                            *acc += ds * qv as f64;
                        }
                    }
                }
            }
            let to_matrix = |buf: Vec<f64>| {
                Matrix::from_vec(t_len, d, buf.into_iter().map(|v| v as f32).collect()).expect("shape")
            };
            let (dq, dk, dv) = (to_matrix(dq), to_matrix(dk), to_matrix(dv));
            add_assign(g.w_q.data_mut(), matmul_tn(&cache.h1, &dq).expect("shape").data());
            add_assign(g.w_k.data_mut(), matmul_tn(&cache.h1, &dk).expect("shape").data());
            add_assign(g.w_v.data_mut(), matmul_tn(&cache.h1, &dv).expect("shape").data());
            let mut d_h1 = matmul_nt(&dq, &b.w_q).expect("shape");
            add_assign(d_h1.data_mut(), matmul_nt(&dk, &b.w_k).expect("shape").data());
            add_assign(d_h1.data_mut(), matmul_nt(&dv, &b.w_v).expect("shape").data());
            let d_in_ln = ln_backward(&b.ln1, &cache.ln1, &d_h1, &mut g.ln1);
            add_assign(d_mid.data_mut(), d_in_ln.data());
            dx = d_mid;
        }

        for (p, &tok) in inputs.iter().enumerate() {
            add_assign(grads.token_embedding.row_mut(tok as usize), dx.row(p));
            add_assign(grads.position_embedding.row_mut(p), dx.row(p));
        }
        loss
    }
}

/// Next-token pretraining with Adam on random corpus windows.
///
/// Windows are drawn uniformly with a stream derived from `config.seed`, so
/// the same inputs always yield the same parameters.
pub fn pretrain(
    corpus: &[u8],
    config: &ModelConfig,
    settings: &PretrainSettings,
) -> Result<(Backbone, PretrainLog)> {
    pretrain_with_progress(corpus, config, settings, |_, _| {})
}

pub fn pretrain_with_progress(
    corpus: &[u8],
    config: &ModelConfig,
    settings: &PretrainSettings,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(Backbone, PretrainLog)> {
    config.validate()?;
    if settings.steps == 0 {
        return Err(Error::Argument("pretraining needs at least one step".into()));
    }
    if settings.batch == 0 {
        return Err(Error::Argument("pretraining batch must be positive".into()));
    }
    let window = settings.window.unwrap_or(config.max_seq_len);
    if window == 0 || window > config.max_seq_len {
        return Err(Error::Argument(format!(
            "training window {window} must be in [1, max_seq_len = {}]",
            config.max_seq_len
        )));
    }
    if corpus.len() < window + 1 {
        return Err(Error::Data(format!(
            "corpus of {} bytes is shorter than window + 1 = {}",
            corpus.len(),
            window + 1
        )));
    }
    if config.vocab_size < 256 {
        if let Some(b) = corpus.iter().find(|&&b| b as usize >= config.vocab_size) {
            return Err(Error::Data(format!(
                "corpus byte {b} outside vocabulary of size {}",
                config.vocab_size
            )));
        }
    }
    let tokens: Vec<Token> = corpus.iter().map(|&b| b as Token).collect();
    let mut model = Backbone::new(config.clone())?;
    let mut opt = Adam::new(settings.lr, model.tensors().iter().map(|t| t.len()));
    let mut data_rng = Rng::child(config.seed, 1);
    let mut log = PretrainLog::default();
    let span = tokens.len() - window;
    for step in 0..settings.steps {
        let windows: Vec<&[Token]> = (0..settings.batch)
            .map(|_| {
                let start = data_rng.below(span);
                &tokens[start..start + window + 1]
            })
            .collect();
        let g = model.loss_and_grad(&windows)?;
        opt.step(model.tensors_mut(), g.grads.tensors());
        log.losses.push(g.loss);
        on_step(step, g.loss);
    }
    Ok((model, log))
}

/// Byte-level encoding.
pub fn encode(text: &str) -> Vec<Token> {
    text.bytes().map(Token::from).collect()
}

pub fn decode(tokens: &[Token]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 3,
            n_attn_heads: 2,
            d_ff: 12,
            max_seq_len: 10,
            exit_taps: vec![1, 2],
            seed: 5,
        }
    }

    #[test]
    fn config_validation_lists_all_problems() {
        let bad = ModelConfig {
            vocab_size: 1,
            d_model: 10,
            n_attn_heads: 4,
            exit_taps: vec![3, 2, 8],
            ..ModelConfig::default()
        };
        match bad.validate() {
            Err(Error::Validation(p)) => assert!(p.len() >= 4, "{p:?}"),
            other => panic!("expected validation error, got {other:?}"),
        }
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let m = Backbone::new(tiny_config()).unwrap();
        let a = m.forward_full(&[1, 2, 3]).unwrap();
        let b = m.forward_full(&[1, 2, 3]).unwrap();
        assert_eq!(a, b);
        let one = m.forward_full(&[4]).unwrap();
        assert_eq!(one.hidden_at_tap.len(), 2);
        assert_eq!(one.final_logits.len(), 16);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = Backbone::new(tiny_config()).unwrap();
        assert!(matches!(m.forward_full(&[]), Err(Error::Argument(_))));
        assert!(matches!(m.forward_full(&[16]), Err(Error::Argument(_))));
        assert!(matches!(m.forward_full(&[0; 11]), Err(Error::Capacity(_))));
    }

    #[test]
    fn incremental_path_matches_sequence_path() {
        let m = Backbone::new(tiny_config()).unwrap();
        let tokens = [3, 1, 4, 1, 5, 9, 2];
        let seq = m.forward_eval(&tokens, true).unwrap();
        let (_, inc) = m.prefill(&tokens).unwrap();
        assert_eq!(seq.final_logits, inc.final_logits);
        assert_eq!(seq.hidden_at_tap, inc.hidden_at_tap);
        assert_eq!(seq.final_hidden, inc.final_hidden);
    }

    #[test]
    fn next_token_distribution_is_softmax_of_logits() {
        let m = Backbone::new(tiny_config()).unwrap();
        let p = m.next_token_distribution(&[1, 2]).unwrap();
        let q = math::softmax(&m.forward_full(&[1, 2]).unwrap().final_logits).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn causality() {
        let m = Backbone::new(tiny_config()).unwrap();
        let short = m.sequence_logits(&[1, 2, 3, 4]).unwrap();
        let long = m.sequence_logits(&[1, 2, 3, 4, 7]).unwrap();
        for p in 0..4 {
            for (a, b) in short.row(p).iter().zip(long.row(p)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pretrain_rejects_zero_steps_and_short_corpus() {
        let c = tiny_config();
        let s = PretrainSettings {
            steps: 0,
            lr: 1e-3,
            batch: 1,
            window: None,
        };
        assert!(matches!(pretrain(&[1; 64], &c, &s), Err(Error::Argument(_))));
        let s = PretrainSettings { steps: 1, ..s };
        assert!(matches!(pretrain(&[1; 5], &c, &s), Err(Error::Data(_))));
    }

    #[test]
    fn pretrain_is_deterministic() {
        let c = tiny_config();
        let corpus: Vec<u8> = (0..40).map(|i| (i * 7 % 16) as u8).collect();
        let s = PretrainSettings {
            steps: 3,
            lr: 1e-2,
            batch: 2,
            window: None,
        };
        let (a, la) = pretrain(&corpus, &c, &s).unwrap();
        let (b, lb) = pretrain(&corpus, &c, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0f32, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-3f64;
            let fd = (gelu((x as f64 + h) as f32) as f64 - gelu((x as f64 - h) as f32) as f64) / (2.0 * h);
            assert!((fd - gelu_grad(x) as f64).abs() < 1e-3);
        }
    }
}
