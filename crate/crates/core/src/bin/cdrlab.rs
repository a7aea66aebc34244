use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use cdrlab::experiment::{
    collect_tuned_runs, export_lambda_traces, export_loss_map, generate_scene, run_sweep,
    write_text, ExperimentConfig, ExperimentError, ScenarioKind, DEFAULT_GRID_CELLS,
};
use cdrlab::scenarios::UrbanScene;

#[derive(Parser)]
#[command(name = "cdrlab", version, about = "Semi-supervised learning experiments with teacher pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration and CDRLAB_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent runs.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Toy two-city regression comparison.
    Toy(RunArgs),
    /// Beamforming comparison on the synthetic urban scene.
    Urban(RunArgs),
    /// Full sweep over methods, labeled ratios and seeds.
    Sweep(RunArgs),
    /// Per-cell test loss of a trained urban run.
    LossMap {
        /// Run record (`runs/*.json`).
        run: PathBuf,
        /// Scene to evaluate against; defaults to the run's own scene.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_GRID_CELLS)]
        nx: usize,
        #[arg(long, default_value_t = DEFAULT_GRID_CELLS)]
        ny: usize,
        /// Output CSV; defaults to the run path with `.lossmap.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tuning-parameter trajectories of TDR and CDR runs.
    LambdaTraces {
        /// Run records or directories containing them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "lambda_traces.csv")]
        out: PathBuf,
    },
    /// Random urban scene as TOML.
    GenScene {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs, scenario: Option<ScenarioKind>) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match (&args.config, scenario) {
        (Some(p), _) => ExperimentConfig::read(p)?,
        (None, Some(ScenarioKind::Toy)) => ExperimentConfig::toy_default(),
        (None, Some(_)) => ExperimentConfig::urban_default(),
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(s) = scenario {
        cfg.scenario = s;
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    cfg.out = match &args.out {
        Some(o) => o.clone(),
        None => cfg.resolved_out(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs, scenario: Option<ScenarioKind>) -> Result<bool, ExperimentError> {
    let cfg = load_config(args, scenario)?;
    let result = run_sweep(&cfg, &cfg.out)?;
    let failed = result.failures();
    println!(
        "{} runs, {} failed; results in {}",
        result.rows.len(),
        failed,
        cfg.out.display()
    );
    Ok(failed == 0)
}

fn default_map_path(run: &Path) -> PathBuf {
    run.with_extension("lossmap.csv")
}

fn dispatch(cli: Cli) -> Result<bool, ExperimentError> {
    match cli.command {
        Command::Toy(a) => run(&a, Some(ScenarioKind::Toy)),
        Command::Urban(a) => run(&a, Some(ScenarioKind::Urban)),
        Command::Sweep(a) => run(&a, None),
        Command::LossMap { run, scene, nx, ny, out } => {
            let scene = scene.as_deref().map(UrbanScene::read).transpose()?;
            let out = out.unwrap_or_else(|| default_map_path(&run));
            export_loss_map(&run, scene.as_ref(), nx, ny, &out)?;
            println!("{}", out.display());
            Ok(true)
        }
        Command::LambdaTraces { runs, out } => {
            let files = collect_tuned_runs(&runs)?;
            export_lambda_traces(&files, &out)?;
            println!("{} runs traced into {}", files.len(), out.display());
            Ok(true)
        }
        Command::GenScene { seed, out } => {
            let text = generate_scene(seed)?;
            match out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
