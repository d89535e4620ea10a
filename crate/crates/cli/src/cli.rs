//! Command-line surface of `ddo-lab`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline;
use crate::verify::{run_suite, Suite};

#[derive(Debug, Parser)]
#[command(name = "ddo-lab", version, about = "Discriminator-style finetuning of small likelihood models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "DDO_LAB_OUT", default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Likelihood pretraining; writes `<out>/pretrain/`.
    Pretrain(Common),
    /// Multi-round self-play from a checkpoint; writes `<out>/ddo/`.
    Ddo {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint; defaults to `<out>/pretrain/model.ddo`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Randomised property suite; prints a JSON report.
    Verify {
        suite: Suite,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Draws samples from a checkpoint into `<out>/samples.csv`.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        label: Option<usize>,
    },
    /// Prints the selection metric of a checkpoint as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Writes density grids and sample scatters into `<out>/plot/`.
    Plotdata {
        #[command(flatten)]
        common: Common,
        /// Fine-tuned checkpoint, written as `ddo_*`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Likelihood-trained checkpoint, written as `mle_*`.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        scatter: usize,
    },
    /// Tabulates every grid point of every round of an experiment directory.
    SweepReport {
        /// Experiment directory; defaults to `<out>/ddo`.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, env = "DDO_LAB_OUT", default_value = "runs")]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn require_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such checkpoint: {}", p.display())))
    }
}

/// Executes one parsed command.
pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let cfg = load_config(&c)?;
            pipeline::print_json(&pipeline::run_pretrain(&cfg, &c.out.join("pretrain"))?)
        }
        Command::Ddo {
            common,
            ckpt,
            rounds,
            jobs,
        } => {
            let cfg = load_config(&common)?;
            let ckpt = ckpt.unwrap_or_else(|| common.out.join("pretrain").join("model.ddo"));
            require_file(&ckpt)?;
            let summary = pipeline::run_ddo(&cfg, &ckpt, &common.out.join("ddo"), rounds, jobs)?;
            pipeline::print_json(&summary)
        }
        Command::Verify {
            suite,
            trials,
            seed,
            report,
        } => {
            let r = run_suite(suite, trials, seed)?;
            if let Some(p) = report {
                std::fs::write(p, serde_json::to_string_pretty(&r)? + "\n")?;
            }
            pipeline::print_json(&r)?;
            if r.passed {
                Ok(())
            } else {
                Err(CliError::Verification(format!(
                    "{} of {} trials failed",
                    r.failures, r.trials
                )))
            }
        }
        Command::Sample {
            common,
            ckpt,
            n,
            label,
        } => {
            let cfg = load_config(&common)?;
            require_file(&ckpt)?;
            pipeline::run_sample(&cfg, &ckpt, n, label, cfg.seed, &common.out.join("samples.csv"))
        }
        Command::Eval { common, ckpt } => {
            let cfg = load_config(&common)?;
            require_file(&ckpt)?;
            pipeline::print_json(&pipeline::run_eval(&cfg, &ckpt)?)
        }
        Command::Plotdata {
            common,
            ckpt,
            baseline,
            scatter,
        } => {
            let cfg = load_config(&common)?;
            let mut models = Vec::new();
            for (name, p) in [("mle", baseline), ("ddo", ckpt)] {
                if let Some(p) = p {
                    require_file(&p)?;
                    models.push((name.to_string(), p));
                }
            }
            let files = pipeline::run_plotdata(&cfg, &models, scatter, &common.out.join("plot"))?;
            pipeline::print_json(&files)
        }
        Command::SweepReport { dir, out } => {
            let dir = dir.unwrap_or_else(|| out.join("ddo"));
            let rows = pipeline::run_sweep_report(&dir)?;
            pipeline::write_sweep_report(&rows, std::io::stdout().lock())
        }
    }
}

/// Parses arguments and runs. Argument errors map to usage failures
/// (exit code 1); `--help` and `--version` are not errors.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            Ok(())
        }
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}
