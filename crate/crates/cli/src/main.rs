//! `lle`: corpus generation, staged training, inference and evaluation.
//!
//! Exit codes: 0 success, 1 domain error (bad data, wrong stage, failed
//! check), 2 usage error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        CliError::Domain(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Domain(m) => f.write_str(m),
        }
    }
}

impl From<lle_core::Error> for CliError {
    fn from(e: lle_core::Error) -> Self {
        CliError::Domain(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "lle", version, about = "Cross-lingual TTS/VC on latent linguistic embeddings")]
struct Cli {
    /// Worker threads (1 = single-threaded); results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.step_count=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Clone, Debug)]
pub struct StageArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Input checkpoint (for `train`, only an unfinished run to resume).
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Corpus directory; defaults to `paths.corpus`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output checkpoint; defaults to `<paths.checkpoints>/<stage>.ckpt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stop after this many optimizer steps and write a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        /// Corpus spec (TOML or JSON); built-in default if omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the corpus spec seed (and `LLE_SEED`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Initial multi-speaker training on the source language.
    Train(StageArgs),
    /// Adapt an initial checkpoint to the target speaker.
    Adapt(StageArgs),
    /// Jointly fine-tune decoder and vocoder of an adapted checkpoint.
    Weld(StageArgs),
    /// Text-to-speech into the checkpoint's target speaker.
    Tts {
        #[arg(long)]
        ckpt: PathBuf,
        /// Lines of `symbol_id duration`.
        #[arg(long)]
        phonemes: PathBuf,
        /// Waveform blob (μ-law codes).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        render: RenderArgs,
    },
    /// Voice conversion of a feature file into the checkpoint's target speaker.
    Vc {
        #[arg(long)]
        ckpt: PathBuf,
        /// Source feature blob.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        render: RenderArgs,
    },
    /// Objective evaluation: speaker similarity, distortion, tie gap.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Metrics CSV.
        #[arg(long)]
        out: PathBuf,
        /// Initial checkpoint scored as the unadapted baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Conversion target; defaults to the checkpoint's adapted speaker.
        #[arg(long)]
        speaker: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finite-difference check of every objective's gradient.
    GradCheck {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the effective run configuration (defaults, file, overrides).
    ShowConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pairwise preference statistics from a votes CSV.
    Prefs {
        #[arg(long)]
        votes: PathBuf,
        /// Metrics CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Debug)]
pub struct RenderArgs {
    /// Vocoder sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the generated features.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Also write a 16-bit PCM WAV render for listening.
    #[arg(long)]
    pub pcm: Option<PathBuf>,
    /// Sample rate written into the WAV header.
    #[arg(long, default_value_t = 16000)]
    pub sample_rate: u32,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::domain(format!("thread pool: {e}")))?;
    }
    use lle_core::protocol::StageKind;
    match cli.command {
        Command::GenData { spec, out, seed } => commands::gen_data(spec.as_deref(), &out, seed),
        Command::Train(a) => commands::stage(StageKind::Initial, &a),
        Command::Adapt(a) => commands::stage(StageKind::Adapt, &a),
        Command::Weld(a) => commands::stage(StageKind::Weld, &a),
        Command::Tts {
            ckpt,
            phonemes,
            out,
            render,
        } => commands::tts(&ckpt, &phonemes, &out, &render),
        Command::Vc {
            ckpt,
            source,
            out,
            render,
        } => commands::vc(&ckpt, &source, &out, &render),
        Command::Eval {
            ckpt,
            corpus,
            out,
            baseline,
            speaker,
            config,
        } => commands::eval(&ckpt, &corpus, &out, baseline.as_deref(), speaker.as_deref(), &config),
        Command::GradCheck { config } => commands::grad_check(&config),
        Command::ShowConfig { config } => {
            let cfg = config::RunConfig::load(config.config.as_deref(), &config.overrides)?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Prefs { votes, out } => commands::prefs(&votes, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
