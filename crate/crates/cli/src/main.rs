//! `mdscore`: reference simulation, training, generation and evaluation.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mdscore::sampler::SamplerMode;

use config::RunConfig;

/// Environment variable holding the worker thread count.
pub const THREADS_VAR: &str = "MDSCORE_THREADS";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
}

impl From<mdscore::Error> for Failure {
    fn from(e: mdscore::Error) -> Self {
        Self { code: if e.is_numeric() { 3 } else { 2 }, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "mdscore", version, about = "Score-based diffusion generation of MD trajectories")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ode,
    Pc,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the reference MD engine on a fixture.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Built-in fixture name or fixture file.
        #[arg(long)]
        fixture: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        record_every: Option<usize>,
        /// Draw starting velocities at this temperature (energy units).
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Train a score model on trajectory files.
    Train {
        #[command(flatten)]
        common: Common,
        /// Trajectory file; repeat for several.
        #[arg(long = "data")]
        data: Vec<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Evaluate batch chunks in parallel.
        #[arg(long)]
        parallel: bool,
    },
    /// Roll out new frames from a start frame with a trained model.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Trajectory file holding the start frame.
        #[arg(long)]
        start: Option<PathBuf>,
        #[arg(long)]
        start_frame: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Score a generated trajectory against a reference.
    Evaluate {
        #[command(flatten)]
        common: Common,
        generated: Option<PathBuf>,
        reference: Option<PathBuf>,
        #[arg(long)]
        t1: Option<usize>,
        #[arg(long)]
        tn: Option<usize>,
        /// Also report ARMSE after optimal rigid alignment of every frame.
        #[arg(long)]
        kabsch: bool,
        /// Write per-frame errors to this CSV file.
        #[arg(long)]
        dump_csv: Option<PathBuf>,
    },
}

fn base_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("{THREADS_VAR} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    match cli.cmd {
        Cmd::Simulate { common, fixture, steps, record_every, temperature } => {
            let mut cfg = base_config(&common)?;
            let s = &mut cfg.simulate;
            if let Some(f) = fixture {
                s.fixture = f;
            }
            if let Some(n) = steps {
                s.steps = n;
            }
            if let Some(n) = record_every {
                s.record_every = n;
            }
            if temperature.is_some() {
                s.temperature = temperature;
            }
            commands::simulate(&cfg)
        }
        Cmd::Train { common, data, epochs, lr, batch, parallel } => {
            let mut cfg = base_config(&common)?;
            let t = &mut cfg.train;
            if !data.is_empty() {
                t.data = data;
            }
            if let Some(e) = epochs {
                t.optim.epochs = e;
            }
            if let Some(lr) = lr {
                t.optim.lr = lr;
            }
            if let Some(b) = batch {
                t.optim.batch = b;
            }
            t.optim.parallel |= parallel;
            commands::train(&mut cfg)
        }
        Cmd::Generate { common, checkpoint, start, start_frame, frames, mode } => {
            let mut cfg = base_config(&common)?;
            let g = &mut cfg.generate;
            if checkpoint.is_some() {
                g.checkpoint = checkpoint;
            }
            if start.is_some() {
                g.start = start;
            }
            if start_frame.is_some() {
                g.start_frame = start_frame;
            }
            if let Some(n) = frames {
                g.frames = n;
            }
            match mode {
                Some(Mode::Ode) => g.sampler.mode = SamplerMode::Ode,
                Some(Mode::Pc) => g.sampler.mode = SamplerMode::PredictorCorrector,
                None => {}
            }
            commands::generate(&cfg)
        }
        Cmd::Evaluate { common, generated, reference, t1, tn, kabsch, dump_csv } => {
            let mut cfg = base_config(&common)?;
            let e = &mut cfg.evaluate;
            if generated.is_some() {
                e.generated = generated;
            }
            if reference.is_some() {
                e.reference = reference;
            }
            if t1.is_some() {
                e.t1 = t1;
            }
            if tn.is_some() {
                e.tn = tn;
            }
            e.kabsch |= kabsch;
            if dump_csv.is_some() {
                e.dump_csv = dump_csv;
            }
            commands::evaluate(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
