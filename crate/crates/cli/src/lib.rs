//! Command-line front end: data generation, meta-training, one-shot
//! fine-tuning, evaluation, gradient verification and the ablation sweep.

pub mod ablation;
pub mod commands;
pub mod gradcheck;
pub mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use duometa::config::ExperimentConfig;
use duometa::experiment::Variant;
use duometa::meta::HypergradMode;
use duometa::tensorcore::TensorError;
use duometa::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "DUOMETA_SEED";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Missing(_) | Error::Io { .. } | Error::Format { .. } => EXIT_MISSING,
        Error::Tensor(t) => match t {
            TensorError::NonFinite(_) | TensorError::Domain { .. } => EXIT_NUMERICAL,
            TensorError::Io(_) | TensorError::Format { .. } => EXIT_MISSING,
            _ => EXIT_CONFIG,
        },
    }
}

#[derive(Debug, Parser)]
#[command(name = "duometa", version, about = "Dual meta-learning lab on synthetic brain phantoms")]
pub struct Cli {
    /// Flat JSON config with dotted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.lr=0.02 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Print the full default config and exit.
    #[arg(long)]
    pub print_defaults: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic age-group pool.
    Gendata {
        /// Pool directory (default: pool.path).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing non-empty directory.
        #[arg(long)]
        force: bool,
        /// JSON file with an array of four group specs (3 train + 1 test).
        #[arg(long)]
        groups: Option<PathBuf>,
    },
    /// Meta-train one ablation variant.
    Metatrain {
        /// Run directory (default: <out_dir>/<variant>/seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        hypergrad_mode: Option<HypergradMode>,
        #[arg(long)]
        episodes: Option<u64>,
        /// Continue from the run directory's state checkpoint.
        #[arg(long)]
        resume: bool,
        /// End the run at the first checkpoint at or after this episode.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// One-shot fine-tune the head on the unseen group.
    Finetune {
        /// Model checkpoint (default: <run>/best.ckpt).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output directory (default: <run>/ft_n<layers>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long = "ft-layers")]
        ft_layers: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Evaluate a checkpoint on the unseen group's held-out split.
    Eval {
        /// Checkpoint (default: <run>/ft_n<layers>/finetuned.ckpt).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the references against themselves (harness check).
        #[arg(long)]
        oracle: bool,
        #[arg(long = "ft-layers")]
        ft_layers: Option<usize>,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Finite-difference verification of the hypergradient.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on one group and test in-group versus on the inverted-contrast group.
    DomainShift {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// gendata → metatrain → finetune → eval for every variant and seed.
    RunPaperAblations {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel seed workers.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Variant letters to run.
        #[arg(long, default_value = "ABCDE")]
        variants: String,
    },
}

/// Defaults, then `--config`, then `--set`, then `DUOMETA_SEED`.
pub fn resolve_config(cli: &Cli, env_seed: Option<&str>) -> duometa::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    if let Some(s) = env_seed {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
    }
    Ok(cfg)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let result = resolve_config(&cli, env_seed.as_deref()).and_then(|cfg| {
        if cli.print_defaults {
            print!("{}", ExperimentConfig::default().to_flat_json());
            return Ok(EXIT_OK);
        }
        match &cli.command {
            None => Err(Error::Config("no command given (see --help)".into())),
            Some(cmd) => commands::dispatch(cmd, cfg),
        }
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
