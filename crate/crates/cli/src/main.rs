use std::path::{Path, PathBuf};
use std::process::ExitCode;

use assemblies_core::checkpoint::Checkpoint;
use assemblies_core::harness::{
    cmd_eval, cmd_generalize, cmd_limbsweep, cmd_replay_export, cmd_train, write_eval_rows, EvalConfig, EvalRow, HarnessError, RunConfig, Variant,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "assemblies", version, about = "Train and evaluate self-assembling limb agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, optionally under a zero-shot variant.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        variant: Option<Variant>,
        /// Evaluate at this many limbs.
        #[arg(long)]
        limbs: Option<usize>,
        /// Also evaluate the training scenario and report percent retained.
        #[arg(long)]
        retained: bool,
        /// Write the summary row as CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint across its task's full variant grid.
    Generalize {
        #[command(flatten)]
        eval: EvalArgs,
        /// CSV destination for the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Performance against limb count.
    Limbsweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated limb counts.
        #[arg(long, value_delimiter = ',', required = true)]
        limbs: Vec<usize>,
        /// Modular policies reuse this checkpoint instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record one evaluation episode as JSON lines.
    ReplayExport {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        limbs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Take eval settings from this run config's `[eval]` section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for evaluation spawns.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    episode_len: Option<usize>,
}

impl EvalArgs {
    fn settings(&self) -> Result<EvalConfig, HarnessError> {
        let mut e = match &self.config {
            Some(p) => RunConfig::load(p)?.eval,
            None => EvalConfig::default(),
        };
        if let Some(s) = self.seed {
            e.seed = s;
        }
        if let Some(n) = self.episodes {
            e.episodes = n;
        }
        if let Some(n) = self.episode_len {
            e.episode_len = n;
        }
        if e.episodes == 0 || e.episode_len == 0 {
            return Err(HarnessError::Config("episodes and episode_len must be positive".into()));
        }
        Ok(e)
    }

    fn checkpoint(&self) -> Result<Checkpoint, HarnessError> {
        Ok(Checkpoint::load(&self.checkpoint)?)
    }
}

fn pick_variant(variant: Option<Variant>, limbs: Option<usize>) -> Result<Variant, HarnessError> {
    match (variant, limbs) {
        (Some(_), Some(_)) => Err(HarnessError::Config("--variant and --limbs are mutually exclusive".into())),
        (Some(v), None) => Ok(v),
        (None, Some(n)) => Ok(Variant::Limbs(n)),
        (None, None) => Ok(Variant::Training),
    }
}

fn write_rows(rows: &[EvalRow], out: Option<&Path>) -> Result<(), HarnessError> {
    match out {
        Some(p) => write_eval_rows(rows, std::fs::File::create(p)?),
        None => write_eval_rows(rows, std::io::stdout()),
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let outcome = cmd_train(&cfg, &dir, |row| {
                if let Some(m) = row.eval_mean {
                    eprintln!("update {:>5}  steps {:>9}  eval {:>10.2}", row.update, row.env_steps, m);
                }
            })?;
            println!(
                "{}: untrained {:.2}, best {:.2} at update {}, final {:.2}",
                outcome.dir.display(),
                outcome.untrained.mean,
                outcome.best.mean,
                outcome.best_update,
                outcome.last.mean
            );
        }
        Command::Eval {
            eval,
            variant,
            limbs,
            retained,
            out,
        } => {
            let settings = eval.settings()?;
            let ck = eval.checkpoint()?;
            let variant = pick_variant(variant, limbs)?;
            let mut rows = Vec::new();
            let mut reference = None;
            if retained && variant != Variant::Training {
                let r = cmd_eval(&ck, Variant::Training, &settings, None)?;
                reference = r.mean;
                rows.push(r);
            }
            rows.push(cmd_eval(&ck, variant, &settings, reference)?);
            write_rows(&rows, out.as_deref())?;
        }
        Command::Generalize { eval, out } => {
            let settings = eval.settings()?;
            let table = cmd_generalize(&eval.checkpoint()?, &settings)?;
            print!("{}", table.render());
            if let Some(p) = out {
                table.write_csv(std::fs::File::create(p)?)?;
            }
        }
        Command::Limbsweep {
            config,
            limbs,
            checkpoint,
            seed,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.join("limbsweep"));
            let rows = cmd_limbsweep(&cfg, &limbs, ck.as_ref(), &dir)?;
            println!("num_limbs,mean,std,trained");
            for r in rows {
                println!("{},{},{},{}", r.num_limbs, r.mean, r.std, r.trained);
            }
        }
        Command::ReplayExport { eval, variant, limbs, out } => {
            let settings = eval.settings()?;
            let n = cmd_replay_export(&eval.checkpoint()?, pick_variant(variant, limbs)?, &settings, &out)?;
            println!("{}: {n} steps", out.display());
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
