use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use occlab::config::{ExperimentConfig, GuideMode};
use occlab::pipeline::{self, EvalOptions};

/// Occupancy-network experiments on a synthetic desk scene.
#[derive(Parser, Debug)]
#[command(name = "occlab", version)]
struct Cli {
    /// TOML experiment config. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set occupancy.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the oracle scene into a training dataset.
    GenerateScene {
        /// Replace an existing non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the occupancy field and the grid tracked alongside it.
    TrainOccupancy,
    /// Train a fresh radiance field with dense or occupancy-guided sampling.
    TrainGuided {
        #[arg(long, default_value = "network")]
        mode: GuideMode,
        /// Occupancy checkpoint (network mode).
        #[arg(long)]
        occupancy: Option<PathBuf>,
        /// Grid snapshot (grid mode).
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Build a momentum grid from a trained occupancy field.
    TrainGridBaseline {
        #[arg(long)]
        occupancy: Option<PathBuf>,
    },
    /// Occupancy table, PSNR table, depth cross-check and point clouds.
    Eval {
        #[arg(long)]
        occupancy: Option<PathBuf>,
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Compare renders of two checkpoints.
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        compare: Option<Vec<PathBuf>>,
    },
    /// Time dense, network-guided and grid-guided training steps.
    Bench,
    /// Write scene- and empty-routed point clouds.
    ExportPointcloud {
        #[arg(long)]
        occupancy: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one dataset view with a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> occlab::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> occlab::Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenerateScene { force } => {
            let m = pipeline::generate_scene(&cfg, force)?;
            println!("wrote {} frames to {}", m.frames.len(), pipeline::Layout::new(&cfg).dataset().display());
        }
        Command::TrainOccupancy => print_json(&pipeline::train_occupancy(&cfg)?)?,
        Command::TrainGuided { mode, occupancy, grid } => {
            print_json(&pipeline::train_guided(&cfg, mode, occupancy.as_deref(), grid.as_deref())?)?
        }
        Command::TrainGridBaseline { occupancy } => {
            print_json(&pipeline::train_grid_baseline(&cfg, occupancy.as_deref())?)?
        }
        Command::Eval { occupancy, grid, compare } => {
            let compare = compare.map(|v| (v[0].clone(), v[1].clone()));
            let report = pipeline::eval(&cfg, &EvalOptions { occupancy, grid, compare })?;
            print_json(&(report.table, report.psnr, report.compare))?;
        }
        Command::Bench => print_json(&pipeline::bench(&cfg)?.timings)?,
        Command::ExportPointcloud { occupancy, out } => {
            let (scene, empty) = pipeline::export_pointcloud(&cfg, occupancy.as_deref(), out.as_deref())?;
            println!("scene points {scene}, empty points {empty}");
        }
        Command::Render { checkpoint, frame } => {
            for p in pipeline::render(&cfg, &checkpoint, frame)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
