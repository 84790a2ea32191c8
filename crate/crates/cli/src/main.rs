//! `prunelab` command-line interface.
//!
//! Exit codes: 0 success (every check passed), 1 failed check or runtime
//! error, 2 usage error (bad flags, unreadable or invalid config).

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use prunelab::harness::{prune_round, train_round, write_records, TrainedRound};
use prunelab::theory::{thm4_grid, thm5_grid};
use prunelab::{
    emit, reproduce_table, run_experiment, verify_theorems, EdgeMode, ExperimentConfig, ExperimentRecord, Format, Method,
    VerifyOptions,
};

#[derive(Parser)]
#[command(name = "prunelab", version, about = "Teacher-student pruning experiments and theory checks")]
struct Cli {
    /// Repeat for more log output (info, debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher and a specialized student; writes the pair as JSON.
    Train {
        #[command(flatten)]
        common: Common,
        /// Round index; selects the derived seed.
        #[arg(long, default_value_t = 0)]
        round: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a trained pair with every configured method and emit records.
    Prune {
        #[command(flatten)]
        common: Common,
        /// JSON written by `train`.
        #[arg(long)]
        input: PathBuf,
        /// Hidden nodes to keep; overrides the config's grid.
        #[arg(long, value_delimiter = ',')]
        k_n: Option<Vec<usize>>,
        #[command(flatten)]
        output: Output,
    },
    /// Run all rounds and emit per-round and summary records.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
    },
    /// Emit the node-versus-edge difference grid as CSV (Z,c,diff).
    TheoryGrid {
        /// Compare reweighted DPP node pruning with optimally rescaled
        /// random edge pruning instead of the plain versions.
        #[arg(long)]
        reweighted: bool,
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, default_value_t = 4.0)]
        v_star: f64,
        #[arg(long, default_value_t = 4)]
        z_min: usize,
        #[arg(long, default_value_t = 30)]
        z_max: usize,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every analytic and simulation check; writes a JSON report.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Smaller oracle sample counts and no noisy panel.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the noiseless and noisy panels and compare with the reference table.
    ReproduceTable {
        #[command(flatten)]
        common: Common,
        /// JSON file for the comparison.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config file plus flag overrides; flags win.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Comma list of dpp_node, rand_node, imp_node, rand_edge, imp_edge.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    reweight: bool,
    #[arg(long)]
    edge_mode: Option<EdgeMode>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    train_steps: Option<usize>,
}

#[derive(Args)]
struct Output {
    /// Defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: Format,
}

enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
    ChecksFailed,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<prunelab::Error> for Failure {
    fn from(e: prunelab::Error) -> Self {
        match e {
            prunelab::Error::InvalidArgument(_) | prunelab::Error::TheoremDomain(_) => Failure::Usage(e.into()),
            other => Failure::Run(other.into()),
        }
    }
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(Failure::Usage)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(sigma) = self.sigma {
            cfg.sigma = sigma;
        }
        if let Some(methods) = &self.methods {
            cfg.methods = methods.clone();
        }
        if self.reweight {
            cfg.reweight = true;
        }
        if let Some(mode) = self.edge_mode {
            cfg.edge_mode = mode;
        }
        if let Some(rounds) = self.rounds {
            cfg.rounds = rounds;
        }
        if let Some(steps) = self.train_steps {
            cfg.train_steps = steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_output(records: &[ExperimentRecord], output: &Output) -> Result<(), Failure> {
    match &output.out {
        Some(path) => emit(records, output.format, path)?,
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write_records(records, output.format, &mut lock)?;
            lock.flush().map_err(anyhow::Error::from)?;
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { common, round, out } => {
            let cfg = common.config()?;
            let trained = train_round(&cfg, round)?;
            eprintln!(
                "round {round}: closed-form GE {:.4} after {} attempt(s), {:.1}s",
                trained.ge_closed, trained.attempts, trained.train_seconds
            );
            write_json(&trained, &out)
        }
        Command::Prune { common, input, k_n, output } => {
            let mut cfg = common.config()?;
            let text = fs::read_to_string(&input)
                .with_context(|| format!("reading {}", input.display()))
                .map_err(Failure::Usage)?;
            let trained: TrainedRound = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", input.display()))
                .map_err(Failure::Usage)?;
            cfg.n = trained.student.input_dim();
            cfg.k = trained.student.hidden_count();
            cfg.m = trained.teacher.hidden_count();
            if let Some(k_n) = k_n {
                cfg.k_n_grid = k_n;
            }
            cfg.validate()?;
            write_output(&prune_round(&cfg, &trained)?, &output)
        }
        Command::Experiment { common, output } => {
            let cfg = common.config()?;
            let report = run_experiment(&cfg)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            write_output(&report.records, &output)
        }
        Command::TheoryGrid { reweighted, m, v_star, z_min, z_max, resolution, out } => {
            if z_min > z_max || m == 0 || resolution == 0 {
                return Err(Failure::Usage(anyhow!("need 0 < m, 0 < resolution and z_min <= z_max")));
            }
            let zs: Vec<usize> = (z_min..=z_max).collect();
            let grid = if reweighted {
                thm5_grid(m, v_star, &zs, resolution)?
            } else {
                thm4_grid(m, v_star, &zs, resolution)?
            };
            match out {
                Some(path) => fs::write(&path, grid.to_csv()).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{}", grid.to_csv()),
            }
            Ok(())
        }
        Command::Verify { common, quick, out } => {
            let cfg = common.config()?;
            let opts = if quick {
                VerifyOptions {
                    kernel_oracle_samples: 8_000,
                    edge_masks: 1_000,
                    sampler_samples: 10_000,
                    noisy_panel: false,
                    ..Default::default()
                }
            } else {
                VerifyOptions::default()
            };
            let report = verify_theorems(&cfg, &opts)?;
            print!("{}", report.render());
            if let Some(path) = out {
                write_json(&report, &path)?;
            }
            if report.all_passed() { Ok(()) } else { Err(Failure::ChecksFailed) }
        }
        Command::ReproduceTable { common, out } => {
            let cfg = common.config()?;
            let (table, _, _) = reproduce_table(&cfg)?;
            print!("{}", table.render());
            if let Some(path) = out {
                write_json(&table, &path)?;
            }
            if table.passed() { Ok(()) } else { Err(Failure::ChecksFailed) }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::ChecksFailed) => ExitCode::from(1),
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
    }
}
