use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use hierfl::config::RunConfig;
use hierfl::data::{generate_population, write_data_dir};
use hierfl::engine::{run, run_fedavg_baseline};
use hierfl::report::{self, MetricsTable};

#[derive(Parser)]
#[command(name = "hierfl", version, about = "Self-organizing hierarchical federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-cluster population and write it as CSV shards.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation and write metrics, snapshots and manifests.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also run flat federated averaging and write metrics_fedavg.csv.
        #[arg(long)]
        baseline: bool,
        /// Override run.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override run.workers.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Convert a hierarchy snapshot to Graphviz DOT.
    ExportDot {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-round accuracy deltas between two run directories (a - b).
    Compare {
        #[arg(long)]
        run_dir_a: PathBuf,
        #[arg(long)]
        run_dir_b: PathBuf,
        /// Read metrics_fedavg.csv from run b instead of metrics.csv.
        #[arg(long)]
        b_baseline: bool,
        /// Write the per-round delta table here as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let Some(pop) = &cfg.population else {
        return Err(hierfl::Error::config("population", "gen-data needs a [population] section").into());
    };
    let (agents, assignment) = generate_population(pop)?;
    let manifest = write_data_dir(out, pop, &agents, &assignment)?;
    println!("wrote {} agents to {}", manifest.agents.len(), out.display());
    Ok(())
}

fn run_cmd(config: &Path, out: &Path, baseline: bool, seed: Option<u64>, workers: Option<usize>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(w) = workers {
        cfg.run.workers = w;
    }
    cfg.run.baseline |= baseline;
    cfg.validate()?;
    let (data, _) = cfg.load_agents()?;
    let base = if cfg.run.baseline { Some(run_fedavg_baseline(&cfg, &data)?) } else { None };
    let output = run(cfg.clone(), data)?;
    report::write_run_dir(out, &cfg, &output, base.as_ref())?;
    if let Some(last) = output.metrics.last() {
        println!("round {}: personalized acc {:.4}, global acc {:.4}", last.round, last.mean_personal_acc, last.global_acc);
    }
    if let Some(last) = base.as_ref().and_then(|b| b.metrics.last()) {
        println!("fedavg: personalized acc {:.4}, global acc {:.4}", last.mean_personal_acc, last.global_acc);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn export_dot(snapshot: &Path, out: &Path) -> Result<()> {
    let snap = report::read_snapshot(snapshot)?;
    let dot = snap.to_dot()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(out, dot).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn compare(a: &Path, b: &Path, b_baseline: bool, out: Option<&Path>) -> Result<()> {
    let table_a = MetricsTable::read(&a.join(report::METRICS_FILE))?;
    let b_file = if b_baseline { report::BASELINE_METRICS_FILE } else { report::METRICS_FILE };
    let table_b = MetricsTable::read(&b.join(b_file))?;
    let cmp = report::compare(&table_a, &table_b)?;
    print!("{}", cmp.summary());
    if let Some(path) = out {
        fs::write(path, cmp.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Run { config, out, baseline, seed, workers } => run_cmd(&config, &out, baseline, seed, workers),
        Command::ExportDot { snapshot, out } => export_dot(&snapshot, &out),
        Command::Compare { run_dir_a, run_dir_b, b_baseline, out } => compare(&run_dir_a, &run_dir_b, b_baseline, out.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| e.downcast_ref::<hierfl::Error>().is_some_and(|e| e.is_config()));
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
