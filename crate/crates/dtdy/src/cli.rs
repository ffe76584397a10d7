//! Command-line front end. Every failure ends as one `error[kind]: ...` line
//! and a kind-specific exit code.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline;

#[derive(Parser, Debug)]
#[command(
    name = "dtdy",
    about = "Speaker verification with decomposed time-dynamic convolutions"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Master seed; overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for embedding extraction.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic speaker corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split of a manifest.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a trial list and report EER and minDCF.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the utterance embedding of one file.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Speaker activation map of one utterance.
    Sam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        speaker: Option<usize>,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frame-level similarity grouped by phoneme class.
    Frames {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter counts of every model variant.
    Params,
    /// Print the effective configuration.
    Config,
}

fn build_config(c: &Common) -> Result<(RunConfig, u64)> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &c.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string())?;
    }
    let seed = cfg.seed()?;
    if c.threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    Ok((cfg, seed))
}

fn set_path(cfg: &mut RunConfig, key: &str, p: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = p {
        cfg.set(key, &p.display().to_string())?;
    }
    Ok(())
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let (mut cfg, seed) = build_config(&cli.common)?;
    let threads = cli.common.threads;
    let say = |out: &mut dyn Write, s: String| {
        writeln!(out, "{s}").map_err(|e| Error::io(std::path::Path::new("<stdout>"), e))
    };
    match cli.command {
        Command::Synth { out: dir } => {
            let m = pipeline::synth(&cfg, seed, &dir)?;
            say(
                out,
                format!(
                    "wrote {} utterances to {}",
                    m.utterances.len(),
                    dir.display()
                ),
            )?;
        }
        Command::Train {
            out: dir,
            manifest,
            resume,
        } => {
            set_path(&mut cfg, "data.manifest", &manifest)?;
            let mut log = |line: &str| {
                let _ = writeln!(err, "{line}");
            };
            let s = pipeline::train(&cfg, seed, &dir, resume.as_deref(), &mut log)?;
            say(
                out,
                format!(
                    "trained {} epochs, {} steps, last loss {:.6}",
                    s.epochs, s.steps, s.last_loss
                ),
            )?;
        }
        Command::Eval {
            checkpoint,
            trials,
            out: dir,
        } => {
            set_path(&mut cfg, "data.trials", &trials)?;
            let r = pipeline::evaluate(&checkpoint, &cfg.path("data.trials")?, &dir, threads)?;
            say(out, pipeline::report_text(&r).trim_end().to_string())?;
        }
        Command::Embed {
            checkpoint,
            wav,
            out: file,
        } => {
            let e = pipeline::embed(&checkpoint, &wav, &file)?;
            say(
                out,
                format!(
                    "wrote {}-dimensional embedding to {}",
                    e.len(),
                    file.display()
                ),
            )?;
        }
        Command::Sam {
            checkpoint,
            manifest,
            wav,
            speaker,
            layer,
            out: dir,
        } => {
            set_path(&mut cfg, "data.manifest", &manifest)?;
            if let Some(s) = speaker {
                cfg.set("sam.speaker", &s.to_string())?;
            }
            if let Some(l) = layer {
                cfg.set("sam.layer", &l)?;
            }
            let r = pipeline::sam(&cfg, seed, &checkpoint, wav.as_deref(), &dir, threads)?;
            if let Some(a) = r.head_accuracy {
                say(out, format!("head accuracy {a:.4}"))?;
            }
            say(
                out,
                format!(
                    "wrote {}x{} map to {}",
                    r.map.n_mels,
                    r.map.n_frames,
                    dir.display()
                ),
            )?;
        }
        Command::Frames {
            checkpoint,
            manifest,
            out: dir,
        } => {
            set_path(&mut cfg, "data.manifest", &manifest)?;
            let a = pipeline::frames(&checkpoint, &cfg.path("data.manifest")?, &dir, threads)?;
            say(
                out,
                format!(
                    "same-speaker mean {:.6}, cross-speaker mean {:.6}",
                    pipeline::FrameAnalysis::mean(&a.same),
                    pipeline::FrameAnalysis::mean(&a.cross)
                ),
            )?;
        }
        Command::Params => {
            for (name, n) in pipeline::params(&cfg)? {
                say(out, format!("{name},{n}"))?;
            }
        }
        Command::Config => say(out, cfg.dump().trim_end().to_string())?,
    }
    Ok(())
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            let _ = writeln!(err, "error[usage]: {first}");
            return 2;
        }
    };
    match execute(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error[{}]: {msg}", e.kind());
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    run_with(
        std::env::args_os(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    )
}
