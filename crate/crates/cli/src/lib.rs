//! `oe-forge`: config-driven outlier-exposure experiments on embedding
//! files. See [`commands`] for what each subcommand reads and writes.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use oe_forge_core::fixture::{generate, FixtureSpec};

use crate::commands::Run;
use crate::config::Config;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "oe-forge", version, about = "Outlier exposure for OoD detection on frozen embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: `out/` next to the config file).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit class means and shared covariance on `id_train`.
    Stats(Common),
    /// Filter outlier candidates.
    Filter {
        #[command(flatten)]
        common: Common,
        /// Filter chain, overriding `[filter] kind`.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Synthesize virtual outliers from class statistics.
    Synth(Common),
    /// Write a noise-injected copy of the training outliers.
    Noise(Common),
    /// Train the linear head with the outlier-exposure objective.
    Train(Common),
    /// Score ID and OoD sets and write detection reports.
    Eval(Common),
    /// Re-run filter, train and eval for each value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of k, delta, p, lambda, noise_variance, T.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values.
        #[arg(long)]
        values: Option<String>,
    },
    /// Write the synthetic fixture and a matching config to a directory.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn open(common: &Common) -> Result<Run, CliError> {
    let cfg = Config::load(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| {
        common.config.parent().map(Path::to_path_buf).unwrap_or_default().join("out")
    });
    Run::new(cfg, out)
}

/// Config matching the files written by [`write_fixture`].
pub const FIXTURE_CONFIG: &str = "\
seed = 0

[data]
id_train = id_train.emb
id_val = id_val.emb
id_test = id_test.emb
candidates = outlier_candidates.emb
classes_file = classes.txt
ood.near = ood_near.emb
ood.far = ood_far.emb

[filter]
kind = mahalanobis
p = 0.15
direction = farthest

[train]
lambda = 0.5
epochs = 100
lr = 0.03
noise_variance = 0.016

[score]
kind = energy
temperature = 1
tpr = 0.95
";

pub fn write_fixture(dir: &Path, seed: u64) -> Result<(), CliError> {
    generate(&FixtureSpec::default(), seed)?.write(dir)?;
    let p = dir.join("oe-forge.conf");
    std::fs::write(&p, FIXTURE_CONFIG.replacen("seed = 0", &format!("seed = {seed}"), 1))
        .map_err(|e| CliError::output(&p, e))
}

/// Executes one parsed command.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    let (common, f): (&Common, Box<dyn FnOnce(&mut Run) -> Result<(), CliError>>) = match &cli.command {
        Command::Fixture { out, seed } => return write_fixture(out, *seed),
        Command::Stats(c) => (c, Box::new(|r| commands::cmd_stats(r).map(drop))),
        Command::Filter { common, kind } => {
            let kind = kind.clone();
            (
                common,
                Box::new(move |r| {
                    if let Some(k) = kind {
                        r.cfg.set("filter", "kind", k);
                    }
                    commands::cmd_filter(r).map(drop)
                }),
            )
        }
        Command::Synth(c) => (c, Box::new(|r| commands::cmd_synth(r).map(drop))),
        Command::Noise(c) => (c, Box::new(|r| commands::cmd_noise(r).map(drop))),
        Command::Train(c) => (c, Box::new(|r| commands::cmd_train(r).map(drop))),
        Command::Eval(c) => (c, Box::new(|r| commands::cmd_eval(r).map(drop))),
        Command::Sweep { common, param, values } => {
            let (param, values) = (param.clone(), values.clone());
            (common, Box::new(move |r| commands::cmd_sweep(r, param, values).map(drop)))
        }
    };
    let mut run = open(common)?;
    f(&mut run)?;
    run.finish()
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("oe-forge: {e}");
            e.exit_code()
        }
    }
}
