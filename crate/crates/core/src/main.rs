//! Command-line driver: train, eval, decode, alpha-sweep, gradcheck,
//! gen-corpus. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ddconformer::config::{parse_langs_arg, RunConfig};
use ddconformer::data::generate_corpus;
use ddconformer::error::{Error, Result};
use ddconformer::eval;
use ddconformer::trainer;

#[derive(Parser)]
#[command(name = "ddconformer", version, about = "Dual-decoder conformer speech recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (key = value sections)
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated language subset, e.g. [L1],[L2]
    #[arg(long)]
    langs: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save the best-validation checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory for checkpoint, logs, and vocabs
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a manifest with beam-search decoding
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Beam width
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a single WAV or feature file
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input .wav or .feat path
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
    },
    /// Train one model per alpha in {0.0..1.0} and tabulate WER/CER
    AlphaSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check of the full model
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Generate the synthetic train/dev corpus described by the config
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.training.seed = seed;
    }
    if let Some(langs) = &common.langs {
        cfg.training.langs = parse_langs_arg(langs)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            let summary = trainer::train(&cfg, &out)?;
            println!(
                "trained {} epochs; best validation loss {:.6} at epoch {}; \
                 ctc-skipped {}; checkpoint {}",
                summary.epochs_run,
                summary.best_val_loss,
                summary.best_epoch,
                summary.ctc_skipped_total,
                summary.checkpoint_path.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
            beam,
            out,
        } => {
            let cfg = load_config(&common)?;
            let report = eval::cmd_eval(&cfg, &checkpoint, &manifest, beam, &out)?;
            print!("{}", report.to_csv());
        }
        Command::Decode {
            common,
            checkpoint,
            input,
            beam,
        } => {
            let cfg = load_config(&common)?;
            println!("{}", eval::cmd_decode(&cfg, &checkpoint, &input, beam)?);
        }
        Command::AlphaSweep { common, out } => {
            let cfg = load_config(&common)?;
            let path = eval::cmd_alpha_sweep(&cfg, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(cfg.training.seed);
            let report = trainer::cmd_gradcheck(&cfg, seed)?;
            for (group, err) in trainer::group_report(&report) {
                println!("{group}: max rel err {err:.3e}");
            }
            if !report.passed() {
                return Err(Error::NonFinite(format!(
                    "gradient check failed: max rel err {:.3e} > {:.1e}",
                    report.max_rel_err(),
                    report.tol
                )));
            }
            println!("gradient check passed (tol {:.1e})", report.tol);
        }
        Command::GenCorpus { common, out } => {
            let cfg = load_config(&common)?;
            let train = generate_corpus(&cfg.synth, &out, "train")?;
            let mut dev_cfg = cfg.synth.clone();
            dev_cfg.utterances_per_language = cfg.dev_utterances_per_language;
            let dev = generate_corpus(&dev_cfg, &out, "dev")?;
            println!(
                "wrote {} train and {} dev utterances under {}",
                train.rows.len(),
                dev.rows.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own help/version output exits 0
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
