use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use cltr::experiment::{
    read_rows, run_experiment, sweep_bias_misspecification, sweep_clipping, tidy_rows, write_tidy, FigureKind,
    RunConfig, RunOutput, Setting,
};
use cltr::ltr::LtrEstimator;

#[derive(Parser)]
#[command(name = "cltr", version, about = "Counterfactual learning-to-rank experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Every (N, estimator, repeat) cell of a configuration.
    Run(RunArgs),
    /// Rows keyed additionally by the clipping-threshold multiplier.
    SweepClip {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.001,1,1000")]
        multipliers: Vec<f64>,
    },
    /// Rows keyed by the interpolation z of the bias estimates.
    SweepBias {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        z: Vec<f64>,
    },
    /// Long-format CSV for the plotting scripts.
    PlotData {
        /// Result CSV written by run or one of the sweeps.
        input: PathBuf,
        #[arg(long, default_value = "learning_curve")]
        kind: String,
        #[arg(long, short)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Raw `key.path=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    setting: Option<String>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau_multiplier: Option<f64>,
    #[arg(long)]
    z: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Overridden by the CLTR_OUTPUT_DIR environment variable.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Write zero wall times so outputs are reproducible byte for byte.
    #[arg(long)]
    no_wall_time: bool,
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(s) = &self.setting {
            cfg.setting = Setting::parse(s)?;
        }
        if let Some(n) = &self.n {
            cfg.n = n.clone();
        }
        if let Some(e) = &self.estimators {
            cfg.estimators = e.iter().map(|s| LtrEstimator::parse(s)).collect::<Result<_, _>>()?;
        }
        if let Some(r) = self.repeats {
            cfg.repeats = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.tau_multiplier {
            cfg.tau_multiplier = t;
        }
        if let Some(z) = self.z {
            cfg.z = z;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if self.no_wall_time {
            cfg.record_wall_time = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn finish(cfg: &RunConfig, out: RunOutput, stem: &str) -> anyhow::Result<ExitCode> {
    let dir = cfg.resolved_output_dir();
    let path = out.write(&dir, stem)?;
    std::fs::write(dir.join(format!("{stem}_config.toml")), cfg.to_toml()?)?;
    let failed = out.rows.iter().filter(|r| !r.is_ok()).count();
    eprintln!("{} rows written to {}", out.rows.len(), path.display());
    if failed > 0 {
        eprintln!("{failed} cells failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let out = run_experiment(&cfg)?;
            finish(&cfg, out, "results")
        }
        Command::SweepClip { run, multipliers } => {
            let cfg = run.config()?;
            let out = sweep_clipping(&cfg, &multipliers)?;
            finish(&cfg, out, "clip_sweep")
        }
        Command::SweepBias { run, z } => {
            let cfg = run.config()?;
            let out = sweep_bias_misspecification(&cfg, &z)?;
            finish(&cfg, out, "bias_sweep")
        }
        Command::PlotData { input, kind, output } => {
            let rows = read_rows(&input).with_context(|| format!("reading {}", input.display()))?;
            let tidy = tidy_rows(&rows, FigureKind::parse(&kind)?);
            write_tidy(&output, &tidy)?;
            eprintln!("{} tidy rows written to {}", tidy.len(), output.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
