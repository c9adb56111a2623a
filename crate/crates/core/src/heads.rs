//! Early-exit classifiers.
//!
//! Each head mirrors the backbone's output head: a layer norm followed by a
//! single `d_model × vocab` projection, reading the output of one tapped block.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, LayerNorm, LN_EPS};
use crate::error::{Error, Result};
use crate::math::{self, vec_mat, Matrix, ProbVector};
use crate::rng::Rng;

/// Standard deviation of the scratch projection initialiser.
pub const SCRATCH_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitMode {
    #[serde(rename = "scratch")]
    Scratch,
    #[serde(rename = "copied")]
    CopiedFromLmHead,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(InitMode::Scratch),
            "copied" => Ok(InitMode::CopiedFromLmHead),
            other => Err(Error::Argument(format!(
                "unknown init mode {other:?} (expected scratch or copied)"
            ))),
        }
    }
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitMode::Scratch => "scratch",
            InitMode::CopiedFromLmHead => "copied",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitHead {
    /// 1-based block index whose output this head reads.
    pub tap_index: usize,
    pub norm: LayerNorm,
    pub proj: Matrix,
    pub init_mode: InitMode,
}

impl ExitHead {
    /// `layer_norm(hidden) · proj`.
    pub fn logits(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        let normed = math::layer_norm(hidden, &self.norm.gain, &self.norm.bias, LN_EPS)?;
        vec_mat(&normed, &self.proj)
    }

    pub fn distribution(&self, hidden: &[f32]) -> Result<ProbVector> {
        math::softmax(&self.logits(hidden)?)
    }

    pub fn tensors(&self) -> [&[f32]; 3] {
        [&self.norm.gain, &self.norm.bias, self.proj.data()]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f32]; 3] {
        [&mut self.norm.gain, &mut self.norm.bias, self.proj.data_mut()]
    }
}

/// Free functions mirroring the method API.
pub fn head_logits(head: &ExitHead, hidden: &[f32]) -> Result<Vec<f32>> {
    head.logits(hidden)
}

pub fn head_distribution(head: &ExitHead, hidden: &[f32]) -> Result<ProbVector> {
    head.distribution(hidden)
}

/// One head per configured exit tap, ascending by tap.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBank {
    pub heads: Vec<ExitHead>,
}

impl HeadBank {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn taps(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.tap_index).collect()
    }

    pub fn init_mode(&self) -> Option<InitMode> {
        self.heads.first().map(|h| h.init_mode)
    }

    /// Checks tap placement and tensor shapes against the backbone.
    pub fn check_consistent(&self, model: &Backbone) -> Result<()> {
        let c = &model.config;
        if self.taps() != c.exit_taps {
            return Err(Error::Configuration(format!(
                "head taps {:?} differ from configured exit taps {:?}",
                self.taps(),
                c.exit_taps
            )));
        }
        for h in &self.heads {
            if h.proj.shape() != (c.d_model, c.vocab_size)
                || h.norm.gain.len() != c.d_model
                || h.norm.bias.len() != c.d_model
            {
                return Err(Error::Configuration(format!(
                    "head at tap {} has projection {:?}, expected ({}, {})",
                    h.tap_index,
                    h.proj.shape(),
                    c.d_model,
                    c.vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// Builds one head per tap of `model.config.exit_taps`.
///
/// `Scratch` heads get unit-gain zero-bias norms and an N(0, 0.02²)
/// projection drawn from `rng` in tap order; `CopiedFromLmHead` heads copy the
/// backbone's final norm and output projection.
pub fn init_heads(model: &Backbone, mode: InitMode, rng: &mut Rng) -> HeadBank {
    let c = &model.config;
    let heads = c
        .exit_taps
        .iter()
        .map(|&tap| match mode {
            InitMode::Scratch => ExitHead {
                tap_index: tap,
                norm: LayerNorm::identity(c.d_model),
                proj: Matrix::from_fn(c.d_model, c.vocab_size, |_, _| {
                    rng.normal(0.0, SCRATCH_INIT_STD) as f32
                }),
                init_mode: mode,
            },
            InitMode::CopiedFromLmHead => ExitHead {
                tap_index: tap,
                norm: model.final_norm.clone(),
                proj: model.lm_head.clone(),
                init_mode: mode,
            },
        })
        .collect();
    HeadBank { heads }
}
