use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use earlyexit::calibrate::ConfidenceMetric;
use earlyexit::harness::{self, Overrides, RunConfig};
use earlyexit::heads::InitMode;
use earlyexit::runtime::FillMode;
use earlyexit::{Error, Result};

#[derive(Parser)]
#[command(name = "earlyexit", version, about = "Early-exit heads for a small decoder-only transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Head initialisation: scratch or copied.
    #[arg(long = "init", global = true)]
    init_mode: Option<InitMode>,
    /// Confidence metric: breaking-ties, max-prob or entropy.
    #[arg(long, global = true)]
    metric: Option<ConfidenceMetric>,
    /// Comma-separated ascending list in [0, 1].
    #[arg(long, global = true, value_delimiter = ',')]
    epsilon_grid: Option<Vec<f64>>,
    /// Attention fill for skipped layers: state-copy or exact.
    #[arg(long, global = true)]
    fill_mode: Option<FillMode>,
    /// Output path of the command's main artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone on the corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train exit heads against the frozen backbone.
    TrainHeads {
        #[command(flatten)]
        common: Common,
    },
    /// Collect calibration records.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Compute per-head thresholds for one epsilon.
    Thresholds {
        #[arg(long)]
        epsilon: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Generate text with early exits.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep epsilon and report agreement, speedup and exit distributions.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        lambda: c.lambda,
        init_mode: c.init_mode,
        metric: c.metric,
        epsilon_grid: c.epsilon_grid.clone(),
        fill_mode: c.fill_mode,
    });
    Ok(cfg)
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(out) = common.out {
                cfg.paths.weights = out;
            }
            let o = harness::cmd_pretrain(&cfg, &mut progress)?;
            println!("final loss {:.4}; wrote {}", o.final_loss, o.weights.display());
        }
        Command::TrainHeads { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(out) = common.out {
                cfg.paths.heads = out;
            }
            let o = harness::cmd_train_heads(&cfg, &mut progress)?;
            let s = o.log.final_summary(0.1);
            for k in 0..s.accuracy.len() {
                println!(
                    "head {k}: accuracy {:.4}, entropy {:.4}, loss {:.4}",
                    s.accuracy[k], s.entropy[k], s.loss[k]
                );
            }
            println!("wrote {} and {}", o.heads.display(), o.train_log.display());
        }
        Command::Calibrate { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(out) = common.out {
                cfg.paths.records = out;
            }
            let records = harness::cmd_calibrate(&cfg)?;
            println!("{} records; wrote {}", records.len(), cfg.paths.records.display());
        }
        Command::Thresholds { epsilon, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(out) = common.out {
                cfg.paths.thresholds = out;
            }
            let t = harness::cmd_thresholds(&cfg, epsilon)?;
            println!("calibration guarantee holds for epsilon {epsilon}");
            println!("tau {:?}; wrote {}", t.tau, cfg.paths.thresholds.display());
        }
        Command::Generate {
            prompt,
            max_tokens,
            common,
        } => {
            let cfg = load_config(&common)?;
            let (trace, secs) = harness::cmd_generate(&cfg, &prompt, max_tokens, common.out.as_deref())?;
            println!("{prompt}{}", trace.output_text());
            eprintln!(
                "speedup {:.3} (blocks {}/{}), exits {:?}, wall clock {:.3}s",
                trace.totals.speedup,
                trace.totals.blocks_executed,
                trace.totals.baseline_blocks,
                trace.totals.exit_counts,
                secs
            );
        }
        Command::Sweep { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(out) = common.out {
                cfg.paths.reports = out;
            }
            harness::cmd_sweep(&cfg, &mut progress)?;
            print!("{}", std::fs::read_to_string(harness::sweep_csv_path(&cfg)).map_err(|e| Error::Io {
                path: harness::sweep_csv_path(&cfg),
                source: e,
            })?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
