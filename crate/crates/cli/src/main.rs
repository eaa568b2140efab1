use std::io::Write;
use std::path::PathBuf;

use alignkd::gradsuite::SuiteOptions;
use alignkd::train::Stage;
use alignkd_cli::commands::{self, Role, TrainArgs};
use alignkd_cli::{CliResult, RunConfig};
use clap::{Parser, Subcommand};

/// Attention-alignment distillation for toy vision-language models.
#[derive(Parser)]
#[command(name = "alignkd", version)]
struct Cli {
    /// Run configuration (TOML with `schema = 1`). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training and held-out datasets.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        /// Number of training samples to draw.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        max_prompt_tokens: Option<usize>,
        /// Training set path (overrides `data.train_path`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Held-out set path (overrides `data.eval_path`).
        #[arg(long)]
        eval_out: Option<PathBuf>,
    },
    /// Pretrain the teacher or train a student with distillation.
    Train {
        #[arg(long, value_enum, default_value = "student")]
        model: Role,
        #[arg(long)]
        stage: Option<Stage>,
        /// Teacher checkpoint; required when any distillation term is enabled.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Keep teacher signals on disk under the output directory.
        #[arg(long)]
        cache_teacher: bool,
        /// Output directory (default: `<output_dir>/<model>`).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Layer-wise similarity probe of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset (default: `data.eval_path`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_samples: Option<usize>,
    },
    /// Finite-difference check of every loss term in 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Corrupt one backward rule to confirm the check catches it.
        #[arg(long)]
        inject_faulty_backward: bool,
    },
    /// Held-out cross-entropy and exact-match of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset (default: `data.eval_path`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), std::env::vars())?;
    match cli.command {
        Command::Synth { seed, n, max_prompt_tokens, out: train_out, eval_out } => {
            let spec = &mut cfg.data.synth;
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(n) = n {
                spec.n_samples = n;
            }
            if let Some(m) = max_prompt_tokens {
                spec.max_prompt_tokens = m;
            }
            if let Some(p) = train_out {
                cfg.data.train_path = p;
            }
            if let Some(p) = eval_out {
                cfg.data.eval_path = p;
            }
            commands::cmd_synth(&cfg, out)
        }
        Command::Train { model, stage, teacher, resume, cache_teacher, out_dir } => {
            let args = TrainArgs { role: model, stage, teacher, resume, cache_teacher, out_dir };
            commands::cmd_train(&cfg, &args, out)
        }
        Command::Probe { checkpoint, data, out: csv, max_samples } => {
            if let Some(m) = max_samples {
                cfg.probe.max_samples = m;
                cfg.validate()?;
            }
            commands::cmd_probe(&cfg, &checkpoint, data.as_deref(), csv.as_deref(), out)
        }
        Command::Gradcheck { tolerance, inject_faulty_backward } => {
            let opts = SuiteOptions {
                tolerance,
                seed: commands::gradcheck_seed(&cfg),
                inject_faulty_backward,
                ..SuiteOptions::default()
            };
            commands::cmd_gradcheck(&opts, out)
        }
        Command::Eval { checkpoint, data } => commands::cmd_eval(&cfg, &checkpoint, data.as_deref(), out),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    if let Err(e) = run(cli, &mut lock) {
        let _ = lock.flush();
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
