use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;
use serde_json::json;

use curator_core::datamodel::read_upper_bounds;
use curator_core::lifecycle::{Engine, EngineConfig};
use curator_core::metrics::metrics_report;
use curator_core::selection::BudgetMode;
use curator_core::synthgen::{generate, write_stream, StreamSpec};
use curator_core::{validate_bundle, Error, PerformanceTable};

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_STATE: u8 = 3;

#[derive(Parser)]
#[command(name = "curator", version, about = "Lifelong curation of instruction-tuning data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Uniform,
    Density,
}

impl From<Mode> for BudgetMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Uniform => BudgetMode::Uniform,
            Mode::Density => BudgetMode::Density,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a bundle directory and print every check.
    Validate { bundle: PathBuf },
    /// Merge a bundle into the pool and emit the next selection manifest.
    Advance {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        seed: u64,
        /// Compress the pool to this size after selection.
        #[arg(long)]
        pool_budget: Option<usize>,
        #[arg(long, value_enum, default_value = "uniform")]
        budget_mode: Mode,
        /// Bundle with recomputed gradients for already pooled samples.
        #[arg(long)]
        refresh: Option<PathBuf>,
        /// JSON engine config; flags above override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated k grid, e.g. `5,10,15`.
        #[arg(long, value_delimiter = ',')]
        k_grid: Option<Vec<usize>>,
    },
    /// Compress the current pool to at most `pool_budget` samples.
    Compress {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        pool_budget: usize,
    },
    /// Compute metrics for a performance table and print them as JSON.
    Metrics {
        #[arg(long)]
        perf: PathBuf,
        /// `auto` (per-skill maxima) or a `skill,upper_bound` CSV.
        #[arg(long, default_value = "auto")]
        upper_bounds: String,
    },
    /// Write metrics and per-timestep summaries to `<state>/report/`.
    Report {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        perf: PathBuf,
    },
    /// Write a synthetic skill stream, one bundle per timestep.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        timesteps: usize,
        #[arg(long, default_value_t = 5)]
        skills: usize,
        #[arg(long, default_value_t = 500)]
        per_skill: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        duplicate_fraction: f64,
        #[arg(long, default_value_t = 10.0)]
        separation: f64,
        #[arg(long, default_value_t = 64)]
        d_g: usize,
        #[arg(long, default_value_t = 32)]
        d_s: usize,
        #[arg(long)]
        near_duplicates: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) => EXIT_VALIDATION,
        Error::StateLocked(_) | Error::StateCorrupt(_) | Error::StateConflict(_) => EXIT_STATE,
        _ => EXIT_FAILURE,
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json prints"));
}

fn load_config(path: Option<&Path>) -> curator_core::Result<EngineConfig> {
    let Some(path) = path else {
        return Ok(EngineConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> curator_core::Result<u8> {
    match cli.command {
        Command::Validate { bundle } => {
            let report = validate_bundle(&bundle);
            print!("{report}");
            Ok(if report.is_ok() { 0 } else { EXIT_VALIDATION })
        }
        Command::Advance {
            state,
            bundle,
            budget,
            seed,
            pool_budget,
            budget_mode,
            refresh,
            config,
            k_grid,
        } => {
            let mut config = load_config(config.as_deref())?;
            config.budget = budget;
            config.seed = seed;
            config.budget_mode = budget_mode.into();
            if pool_budget.is_some() {
                config.pool_budget = pool_budget;
            }
            if let Some(grid) = k_grid {
                config.k_grid = grid;
            }
            let engine = Engine::open(&state)?;
            let out = engine.advance(&bundle, &config, refresh.as_deref())?;
            print_json(&json!({
                "version": out.version,
                "timestep": out.timestep,
                "k": out.summary.k,
                "selected": out.manifest.entries.len(),
                "pool_size_selected_from": out.pool_size_selected_from,
                "pool_size": out.pool_size,
                "removed": out.compression.as_ref().map_or(0, |p| p.removals.len()),
                "manifest": out.version_dir.join(curator_core::lifecycle::MANIFEST_FILE),
                "config_hash": out.manifest.config_hash,
            }));
            Ok(0)
        }
        Command::Compress { state, pool_budget } => {
            let out = Engine::open(&state)?.compress(pool_budget)?;
            print_json(&json!({
                "version": out.version,
                "pool_size": out.pool_size,
                "removed": out.plan.removals.len(),
            }));
            Ok(0)
        }
        Command::Metrics { perf, upper_bounds } => {
            let mut table = PerformanceTable::from_csv_path(&perf)?;
            if upper_bounds != "auto" {
                let bounds = read_upper_bounds(Path::new(&upper_bounds), table.skills())?;
                table = table.with_upper_bounds(bounds)?;
            }
            print_json(&serde_json::to_value(metrics_report(&table)?).expect("report serializes"));
            Ok(0)
        }
        Command::Report { state, perf } => {
            let files = curator_core::lifecycle::report(&state, &perf)?;
            for f in files.files {
                println!("{}", f.display());
            }
            Ok(0)
        }
        Command::Synth {
            out,
            timesteps,
            skills,
            per_skill,
            seed,
            duplicate_fraction,
            separation,
            d_g,
            d_s,
            near_duplicates,
        } => {
            let spec = StreamSpec {
                duplicate_fraction,
                separation,
                d_g,
                d_s,
                near_duplicates,
                ..StreamSpec::uniform(timesteps, skills, per_skill, seed)
            };
            for p in write_stream(&out, &generate(&spec)?)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("CURATOR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            error!("could not size the thread pool: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
