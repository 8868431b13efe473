//! `millforge` command-line harness.

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use millforge_core::env::EnvConfig;
use millforge_core::protocol::DEFAULT_ENDPOINT;
use millforge_core::ScenarioConfig;

#[derive(Parser, Debug)]
#[command(name = "millforge", version, about = "Robotic milling simulation, passive variable-stiffness control and process-parameter learning")]
struct Cli {
    /// Scenario document (JSON). Built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ControlArgs {
    /// Enable the energy tank.
    #[arg(long, overrides_with = "no_et")]
    et: bool,
    /// Plain variable-stiffness OSC without the energy tank.
    #[arg(long = "no-et", overrides_with = "et")]
    no_et: bool,
    #[arg(long)]
    damping_ratio: Option<f64>,
}

impl ControlArgs {
    pub fn apply(&self, env: &mut EnvConfig) {
        if self.et {
            env.controller.et_enabled = true;
        }
        if self.no_et {
            env.controller.et_enabled = false;
        }
        if let Some(z) = self.damping_ratio {
            env.controller.damping_ratio = z;
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Binary,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one episode and write its trajectory, audit and report.
    Rollout {
        /// `baseline`, `stress`, or a policy JSON file.
        #[arg(long, default_value = "baseline")]
        policy: String,
        #[command(flatten)]
        control: ControlArgs,
    },
    /// Reward breakdown of several strategies over shared seeds.
    Compare {
        /// Comma-separated subset of baseline, policy, policy+doc-offset, ego.
        #[arg(long, value_delimiter = ',', default_value = "baseline,policy,policy+doc-offset,ego")]
        strategies: Vec<String>,
        /// Policy file for the policy strategies.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// `ego_result.json` written by the ego command.
        #[arg(long)]
        ego_result: Option<PathBuf>,
        #[arg(long)]
        n_trials: Option<usize>,
        #[command(flatten)]
        control: ControlArgs,
    },
    /// Train a linear policy with the cross-entropy method.
    Train {
        #[arg(long)]
        generations: Option<usize>,
        #[arg(long)]
        population: Option<usize>,
        /// Start from this linear policy instead of the baseline warm start.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Efficient global optimization of constant process parameters.
    Ego {
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Identify cutting and edge constants from force logs.
    Fit {
        /// Force log CSV with a `.json` metadata sidecar; repeatable.
        #[arg(long = "log")]
        logs: Vec<PathBuf>,
        /// Synthetic log spec (JSON); the generated log is written to the
        /// output directory and included in the fit.
        #[arg(long)]
        synthesize: Option<PathBuf>,
        /// Per-axis weights, e.g. `1,1,0`.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        axis_weights: Option<Vec<f64>>,
    },
    /// Generate a workpiece heightfield.
    GenWorkpiece {
        /// flat, sinusoidal, perlin or fractal.
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        amplitude_mm: Option<f64>,
        #[arg(long)]
        wavelength_mm: Option<f64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Serve the environment over the length-prefixed JSON protocol.
    ServeEnv {
        #[arg(long, default_value = DEFAULT_ENDPOINT)]
        addr: String,
        /// Exit after this many connections have finished.
        #[arg(long)]
        max_connections: Option<usize>,
        #[command(flatten)]
        control: ControlArgs,
    },
}

/// How a command ended; mapped onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Safety(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Safety(_) => 3,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<millforge_core::Error> for Failure {
    fn from(e: millforge_core::Error) -> Self {
        use millforge_core::Error as E;
        match e {
            E::InvalidConfig(_) | E::Json(_) | E::DimensionMismatch { .. } | E::NonSpdGains(_) | E::ZeroSpindleSpeed(_) => {
                Failure::Config(e.to_string())
            }
            e if e.is_safety_stop() => Failure::Safety(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub struct Context {
    pub cfg: ScenarioConfig,
    pub seed: u64,
    pub out: PathBuf,
}

fn load_context(cli: &Cli) -> Result<Context, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ScenarioConfig::load(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&cli.out)?;
    Ok(Context { seed: cfg.seed, cfg, out: cli.out.clone() })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let ctx = load_context(&cli)?;
    match cli.command {
        Command::Rollout { policy, control } => commands::rollout(&ctx, &policy, &control),
        Command::Compare { strategies, policy, ego_result, n_trials, control } => {
            commands::compare(&ctx, &strategies, policy.as_deref(), ego_result.as_deref(), n_trials, &control)
        }
        Command::Train { generations, population, init } => commands::train(&ctx, generations, population, init.as_deref()),
        Command::Ego { budget } => commands::ego(&ctx, budget),
        Command::Fit { logs, synthesize, axis_weights } => commands::fit(&ctx, &logs, synthesize.as_deref(), axis_weights),
        Command::GenWorkpiece { family, amplitude_mm, wavelength_mm, format } => {
            commands::gen_workpiece(&ctx, family.as_deref(), amplitude_mm, wavelength_mm, format)
        }
        Command::ServeEnv { addr, max_connections, control } => commands::serve_env(&ctx, &addr, max_connections, &control),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MILLFORGE_LOG_LEVEL", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("config error: {m}"),
                Failure::Safety(m) => eprintln!("safety termination: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
