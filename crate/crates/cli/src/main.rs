mod config;
mod presets;
mod run;

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mlab_core::observables::{divergence, fmt17, TrajectoryRecord};
use mlab_core::phasespace::read_snapshot;
use mlab_core::sme::localization_ratio;
use mlab_core::{weyl, Error};

use config::{ConfigError, ExperimentConfig, LegKind, RawConfig};
use run::{Outcome, RunOptions};

#[derive(Parser)]
#[command(name = "mlab", version, about = "Phase-space quantum/classical dynamics experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Continue from checkpoints left in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop every leg at this time, leaving checkpoints.
    #[arg(long, value_name = "T")]
    stop_at: Option<f64>,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set q.grid.nx=512`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Run (or print) a bundled experiment.
    Preset {
        name: Option<String>,
        /// List the bundled presets.
        #[arg(long)]
        list: bool,
        /// Print the preset config instead of running it.
        #[arg(long)]
        print: bool,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Eigen-spectrum of the Weyl transform of a snapshot.
    Spectrum {
        snapshot: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Write the eigenvalues as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Γ = ∫(|f| − f) of a snapshot.
    Gamma { snapshot: PathBuf },
    /// Localization ratio of each phase-space leg's initial state.
    Locheck {
        config: PathBuf,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Relative deviation of a quantum record from a classical one.
    Compare {
        quantum: PathBuf,
        classical: PathBuf,
        #[arg(long, default_value = "p2")]
        series: String,
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
    },
}

enum Failure {
    Config(String),
    Numeric(String),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(io) => Failure::Io(io.to_string()),
            e if e.is_config() => Failure::Config(e.to_string()),
            e => Failure::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn load(text: &str, args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut raw = RawConfig::parse(text)?;
    for s in &args.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        raw.set(k.trim(), v.trim());
    }
    let mut cfg = ExperimentConfig::from_raw(&raw)?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn execute(text: &str, args: &RunArgs) -> Result<(), Failure> {
    let cfg = load(text, args)?;
    let opts = RunOptions { resume: args.resume, stop_at: args.stop_at };
    match run::run(&cfg, opts)? {
        Outcome::Finished(files) => {
            eprintln!("{}: {} artifacts in {}", cfg.name, files.len(), cfg.out_dir.display());
            for f in files {
                println!("{}", f.display());
            }
        }
        Outcome::Stopped(t) => println!("stopped at t = {}; rerun with --resume to continue", fmt17(t)),
    }
    Ok(())
}

fn read_record(path: &PathBuf) -> Result<TrajectoryRecord, Failure> {
    Ok(TrajectoryRecord::read_csv(BufReader::new(fs::File::open(path)?))?)
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run { config, args } => execute(&fs::read_to_string(&config)?, &args),
        Cmd::Preset { name, list, print, args } => {
            if list {
                for (n, _) in presets::PRESETS {
                    println!("{n}");
                }
                return Ok(());
            }
            let name = name.ok_or_else(|| Failure::Config("preset name required (see --list)".into()))?;
            let text = presets::get(&name).ok_or_else(|| Failure::Config(format!("unknown preset {name:?}")))?;
            if print {
                print!("{text}");
                return Ok(());
            }
            execute(text, &args)
        }
        Cmd::Spectrum { snapshot, stride, out } => {
            let state = read_snapshot(BufReader::new(fs::File::open(&snapshot)?))?;
            let mut rep = weyl::spectrum(&weyl::to_density_matrix_strided(&state, stride)?)?;
            rep.gamma = Some(weyl::gamma(&state));
            println!("t = {}", fmt17(state.t));
            println!("dimension = {}", rep.eigenvalues.len());
            println!("trace = {}", fmt17(rep.trace));
            println!("min_eigenvalue = {}", fmt17(rep.min_eigenvalue()));
            println!("negative_mass = {}", fmt17(rep.negative_mass));
            println!("purity = {}", fmt17(rep.purity));
            if let Some(path) = out {
                let mut w = BufWriter::new(fs::File::create(path)?);
                rep.write_csv(&mut w)?;
                w.flush()?;
            }
            Ok(())
        }
        Cmd::Gamma { snapshot } => {
            let state = read_snapshot(BufReader::new(fs::File::open(&snapshot)?))?;
            println!("{}", fmt17(weyl::gamma(&state)));
            Ok(())
        }
        Cmd::Locheck { config, k, eta } => {
            let raw = RawConfig::parse(&fs::read_to_string(&config)?)?;
            let cfg = ExperimentConfig::from_raw(&raw)?;
            let sme = cfg.legs.iter().find_map(|l| match &l.kind {
                LegKind::Sme(s) => Some(s.sme),
                _ => None,
            });
            for leg in &cfg.legs {
                let LegKind::Phase(p) = &leg.kind else { continue };
                let k = k
                    .or(sme.map(|s| s.k))
                    .unwrap_or(p.evolution.diffusion / (cfg.hbar * cfg.hbar));
                let eta = eta.or(sme.map(|s| s.eta)).unwrap_or(1.0);
                let state = run::initial_state(&cfg, p)?;
                let r = localization_ratio(&cfg.potential, &state, k, eta)?;
                println!(
                    "{}: k = {} eta = {} ratio median = {} min = {} max = {}",
                    leg.name,
                    fmt17(k),
                    fmt17(eta),
                    fmt17(r.median),
                    fmt17(r.min),
                    fmt17(r.max)
                );
            }
            Ok(())
        }
        Cmd::Compare { quantum, classical, series, threshold } => {
            let q = read_record(&quantum)?;
            let c = read_record(&classical)?;
            let d = divergence(&q, &c, &series, threshold)?;
            println!("max_deviation = {} at t = {}", fmt17(d.max_deviation), fmt17(d.max_at));
            match d.first_crossing {
                Some(t) => println!("first_crossing = {}", fmt17(t)),
                None => println!("first_crossing = none"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("MLAB_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("mlab: configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("mlab: numerical failure: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Io(m)) => {
            eprintln!("mlab: {m}");
            ExitCode::from(1)
        }
    }
}
