use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairboard::pipeline::{run_all, run_stage, Stage};
use fairboard::{server, synth, AnalysisConfig, Result};

#[derive(Parser)]
#[command(name = "fairboard", version, about = "Equity audit for segmentation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Analysis config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the config seed; FAIRBOARD_SEED also does, with lower priority.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Smoothing kernel in mm, 0 to 16.
    #[arg(long)]
    fwhm: Option<f64>,
    #[arg(long)]
    n_perm: Option<usize>,
    #[arg(long)]
    bootstrap_iters: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Re-run even when the manifest shows nothing changed.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<AnalysisConfig> {
        let mut cfg = AnalysisConfig::load(&self.config)?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.fwhm {
            cfg.fwhm_mm = v;
        }
        if let Some(v) = self.n_perm {
            cfg.n_perm = v;
        }
        if let Some(v) = self.bootstrap_iters {
            cfg.bootstrap_iters = v;
        }
        if let Some(v) = &self.output {
            cfg.paths.output = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Score every prediction against its ground truth.
    Evaluate(Common),
    /// Subgroup gaps with bootstrap intervals and age-bin means.
    Univariate(Common),
    /// Seven inequality indices per model and outcome.
    Inequality(Common),
    /// Performance, equity and weighted composite rankings.
    League(Common),
    /// Crossed mixed models of performance on patient covariates.
    Cohort(Common),
    /// Voxel-wise lesion-location effects pooled across models.
    Spatial(Common),
    /// Latent-space clustering of performance.
    Representational(Common),
    /// Every stage in order.
    All(Common),
    /// Serve the finished run as JSON.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8765)]
        port: u16,
    },
    /// Write the bundled synthetic study and its config.
    Synth {
        dir: PathBuf,
        #[arg(long, default_value_t = 60)]
        patients: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    let stage = |c: &Common, s: Stage| run_stage(&c.load()?, s, c.force).map(|_| ());
    match cli.command {
        Command::Evaluate(c) => stage(&c, Stage::Evaluate),
        Command::Univariate(c) => stage(&c, Stage::Univariate),
        Command::Inequality(c) => stage(&c, Stage::Inequality),
        Command::League(c) => stage(&c, Stage::League),
        Command::Cohort(c) => stage(&c, Stage::Cohort),
        Command::Spatial(c) => stage(&c, Stage::Spatial),
        Command::Representational(c) => stage(&c, Stage::Representational),
        Command::All(c) => run_all(&c.load()?, c.force).map(|_| ()),
        Command::Serve { common, port } => server::serve(&common.load()?, port),
        Command::Synth { dir, patients, seed } => {
            let path = synth::write_synthetic_study(&dir, patients, seed)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
