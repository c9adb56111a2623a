//! Self-supervised early-exit heads for a small decoder-only transformer.
//!
//! The pipeline has four stages:
//!
//! 1. [`backbone`]: pretrain a byte-level decoder on a text corpus;
//! 2. [`trainer`]: train one exit head per tapped block to imitate the frozen
//!    backbone's next-token distribution, with an entropy penalty;
//! 3. [`calibrate`]: score heads on backbone-generated text and pick, per
//!    head, the smallest confidence threshold whose exits agree with the
//!    backbone at rate `ε`;
//! 4. [`runtime`]: generate with early exits and report agreement, block
//!    speedup and exit distributions.
//!
//! [`harness`] wires the stages into CLI commands with file artifacts.

pub mod backbone;
pub mod calibrate;
pub mod error;
pub mod format;
pub mod harness;
pub mod heads;
pub mod math;
pub mod optim;
pub mod rng;
pub mod runtime;
pub mod trainer;

pub use backbone::{Backbone, ModelConfig, PretrainSettings, Token};
pub use calibrate::{
    build_threshold_table, collect_calibration, compute_threshold, confidence, CalibrationRecord,
    ConfidenceMetric, ThresholdTable,
};
pub use error::{Error, Result};
pub use harness::{RunConfig, SweepReport};
pub use heads::{init_heads, ExitHead, HeadBank, InitMode};
pub use math::{Matrix, ProbVector};
pub use rng::Rng;
pub use runtime::{agreement_eval, generate, step, AgreementReport, ExitDecision, ExitPoint, FillMode, GenerationTrace};
pub use trainer::{head_loss, head_loss_grad, train_heads, TrainLog, TrainSettings};
