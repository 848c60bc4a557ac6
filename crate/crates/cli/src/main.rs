use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bgm_cli::{decode, encode, evaluate_cmd, generate_cmd, train_cmd, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "bgm", version, about = "Video-conditioned piano-roll diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a MIDI file to a 2 x steps x 128 roll tensor.
    Encode {
        midi: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a roll tensor back to MIDI.
    Decode {
        tensor: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser on the manifest corpus.
    Train(RunArgs),
    /// Sample one segment per manifest item.
    Generate(RunArgs),
    /// Score generated MIDI against the manifest's ground truth.
    Evaluate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Encode { midi, out } => {
            let notes = encode(&midi, &out)?;
            eprintln!("encoded {notes} notes into {}", out.display());
        }
        Command::Decode { tensor, out } => {
            let (notes, repairs) = decode(&tensor, &out)?;
            eprintln!("decoded {notes} notes ({repairs} cells repaired) into {}", out.display());
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let r = train_cmd(&cfg, args.out.as_deref())?;
            if r.dropped_notes > 0 {
                eprintln!("warning: {} onsets fall outside the network window", r.dropped_notes);
            }
            eprintln!(
                "trained on {} segments for {} steps; final loss {}; checkpoint {}",
                r.segments,
                r.losses.len(),
                r.losses.last().map_or("n/a".into(), f64::to_string),
                r.checkpoint.display()
            );
        }
        Command::Generate(args) => {
            let cfg = args.load()?;
            let r = generate_cmd(&cfg, args.out.as_deref())?;
            for (id, e) in &r.failed {
                eprintln!("warning: {id}: {e}");
            }
            eprintln!("generated {} items, {} failed", r.written.len(), r.failed.len());
        }
        Command::Evaluate(args) => {
            let cfg = args.load()?;
            let r = evaluate_cmd(&cfg, args.out.as_deref())?;
            if r.retrieval.is_none() {
                eprintln!(
                    "note: retrieval skipped, the pool is smaller than M={}",
                    r.retrieval_config.m
                );
            }
            let out = args.out.as_deref().or(cfg.out.as_deref()).unwrap_or(Path::new("."));
            eprintln!("evaluated {} items; report in {}", r.items, out.join("report.txt").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
