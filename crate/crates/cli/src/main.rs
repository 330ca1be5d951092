use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use elsa_cli::commands::{self, ScenarioArgs};
use elsa_cli::resolve::resolve;
use elsa_core::config::RunConfig;
use elsa_core::objective::ScoreKind;
use elsa_core::{ElsaError, Result};

#[derive(Parser)]
#[command(name = "elsa", version, about = "Energy-based semi-supervised anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Named starting configuration (default, smoke).
    #[arg(long, default_value = "default")]
    preset: String,
    /// JSON file layered over the preset; may be partial.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set finetune.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets the data, split and training seeds.
    #[arg(long, env = "ELSA_SEED")]
    seed: Option<u64>,
    #[arg(long, value_name = "s1|s2|s3")]
    scenario: Option<String>,
    #[arg(long)]
    gamma_l: Option<f64>,
    #[arg(long)]
    gamma_p: Option<f64>,
    #[arg(long, value_name = "elsa|elsa_plus")]
    mode: Option<String>,
    /// Prototype count.
    #[arg(long)]
    prototypes: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        let mut push = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push(format!("{key}={v}"));
            }
        };
        push("scenario.scenario", self.scenario.clone());
        push("scenario.gamma_l", self.gamma_l.map(|v| v.to_string()));
        push("scenario.gamma_p", self.gamma_p.map(|v| v.to_string()));
        push("mode", self.mode.clone());
        push("prototypes.count", self.prototypes.map(|v| v.to_string()));
        overrides.extend(self.overrides.iter().cloned());
        resolve(&self.preset, self.config.as_deref(), &overrides, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario and write train/validation/test datasets.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training; writes a checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics (JSONL).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Prototype fitting and energy fine-tuning from a checkpoint.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Print one `id score` line per sample, in id order.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Training set for the uniformity score's reference embeddings.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Score function (defaults to the checkpoint's).
        #[arg(long)]
        score: Option<ScoreKind>,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test AUROC of a checkpoint on a generated data directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: one run, the class grid, or a pollution sweep.
    Scenario {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Iterate normal configurations × labeled-anomaly mixes.
        #[arg(long, conflicts_with = "sweep_gamma_p")]
        grid: bool,
        /// Comma-separated pollution ratios, e.g. `0,0.05,0.1`.
        #[arg(long, value_delimiter = ',')]
        sweep_gamma_p: Vec<f64>,
        /// Comma-separated seeds for the sweep.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Report directory (runs.jsonl, summary.csv, report.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score × loss ablation on shared splits and pre-training.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated `score/loss` pairs; default is the full 3 × 3 matrix.
        #[arg(long)]
        pairs: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { cfg, out } => commands::gen_data(&cfg.resolve()?, &out),
        Command::Pretrain {
            cfg,
            data,
            out,
            metrics,
        } => commands::pretrain(&cfg.resolve()?, &data, &out, metrics.as_deref()),
        Command::Finetune {
            cfg,
            data,
            checkpoint,
            out,
            metrics,
        } => commands::finetune(&cfg.resolve()?, &data, &checkpoint, &out, metrics.as_deref()),
        Command::Score {
            checkpoint,
            input,
            reference,
            score,
            out,
        } => {
            let text = commands::score(&checkpoint, &input, reference.as_deref(), score)?;
            match out {
                Some(p) => {
                    std::fs::write(&p, &text).map_err(|e| ElsaError::io(&p, e))?;
                    Ok(String::new())
                }
                None => Ok(text),
            }
        }
        Command::Eval { data, checkpoint, out } => commands::eval(&data, &checkpoint, out.as_deref()),
        Command::Scenario {
            cfg,
            grid,
            sweep_gamma_p,
            seeds,
            out,
        } => commands::scenario(
            &cfg.resolve()?,
            &ScenarioArgs {
                grid,
                gamma_p: sweep_gamma_p,
                seeds,
                out,
            },
        ),
        Command::Ablation { cfg, pairs, out } => {
            let pairs = match pairs {
                Some(p) => commands::parse_pairs(&p)?,
                None => commands::all_pairs(),
            };
            commands::ablation(&cfg.resolve()?, &pairs, out.as_deref())
        }
    }
}

fn exit_code(e: &ElsaError) -> u8 {
    match e {
        ElsaError::Io { .. } => 4,
        e if e.is_numeric() => 5,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
