//! Command-line front end for the HFL simulator: topology generation, agent
//! training, single runs, sweeps, assignment comparisons, and clustering
//! evaluation. Every subcommand is deterministic given its arguments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hflsim::assigner::Budgets;
use hflsim::cost::{CostParams, BITS_PER_KB};
use hflsim::d3qn::{load_checkpoint, save_checkpoint, train_agent, EpisodeStats, TrainConfig};
use hflsim::harness::{
    cluster_eval, compare_assignment, manifest_for, run_experiment, sweep, write_atomic,
    CompareRow, ExperimentConfig, Strategy, SweepRow, TopologyConfig,
};
use hflsim::topology::{generate_topology, ParamRanges};
use hflsim::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hflsim",
    about = "Hierarchical federated learning simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random topology and write it as JSON.
    TopoGen {
        #[arg(long, default_value_t = 40)]
        devices: usize,
        #[arg(long, default_value_t = 3)]
        edges: usize,
        /// Side length of the square deployment area in meters.
        #[arg(long, default_value_t = 1000.0)]
        side: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path (JSON).
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train the assignment agent and save a checkpoint.
    TrainAgent {
        /// Devices per episode (H).
        #[arg(long, default_value_t = 20)]
        devices: usize,
        /// Edge servers / actions (M).
        #[arg(long, default_value_t = 3)]
        edges: usize,
        #[arg(long, default_value_t = 2000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path.
        #[arg(long, short)]
        out: PathBuf,
        /// Optional CSV of per-episode training statistics.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Run one experiment from a TOML config.
    Run {
        /// Experiment configuration (TOML).
        #[arg(long, short)]
        config: PathBuf,
        /// Override the run seed (default: base_seed from the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides output_dir from the config).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run several configs with repetitions and summarize.
    Sweep {
        /// One or more experiment configurations (TOML); labels are the file
        /// stems.
        #[arg(long, short, required = true, num_args = 1..)]
        config: Vec<PathBuf>,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        /// Summary CSV output path.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Compare assignment strategies on fresh random instances.
    CompareAssign {
        #[arg(long, default_value_t = 20)]
        devices: usize,
        #[arg(long, default_value_t = 3)]
        edges: usize,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include the exhaustive search (only feasible for small instances).
        #[arg(long)]
        exhaustive: bool,
        /// Agent checkpoint to include the learned policy.
        #[arg(long)]
        agent: Option<PathBuf>,
        /// Summary CSV output path.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Evaluate mini-model vs full-model clustering on one workload.
    ClusterEval {
        /// Experiment configuration (TOML).
        #[arg(long, short)]
        config: PathBuf,
        /// Clustering model size for the full model, in KB.
        #[arg(long, default_value_t = 448.0)]
        full_kb: f64,
        /// Clustering model size for the mini model, in KB.
        #[arg(long, default_value_t = 10.0)]
        mini_kb: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TopoGen {
            devices,
            edges,
            side,
            seed,
            out,
        } => {
            let topo = generate_topology(devices, edges, side, seed, &ParamRanges::default())?;
            let json = serde_json::to_string_pretty(&topo)
                .map_err(|e| Error::Serde(format!("topology serialize: {e}")))?;
            write_atomic(&out, &json)?;
            println!("wrote topology ({devices} devices, {edges} edges) to {}", out.display());
        }
        Command::TrainAgent {
            devices,
            edges,
            episodes,
            seed,
            out,
            curve,
        } => {
            let mut cfg = TrainConfig::new(devices, edges);
            cfg.episodes = episodes;
            cfg.seed = seed;
            let (agent, stats) = train_agent(&cfg)?;
            save_checkpoint(&agent, &out)?;
            if let Some(curve_path) = curve {
                let mut csv = String::from(EpisodeStats::csv_header());
                for s in &stats {
                    csv.push('\n');
                    csv.push_str(&s.csv_row());
                }
                csv.push('\n');
                write_atomic(&curve_path, &csv)?;
            }
            let tail = &stats[stats.len().saturating_sub(50)..];
            let mean_ret: f64 =
                tail.iter().map(|s| s.ret).sum::<f64>() / tail.len() as f64;
            println!(
                "trained {episodes} episodes; mean return over last {}: {mean_ret:.3} (max {})",
                tail.len(),
                devices
            );
            println!("checkpoint written to {}", out.display());
        }
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(dir) = out {
                cfg.output_dir = Some(dir);
            }
            let seed = seed.unwrap_or(cfg.run.base_seed);
            let record = run_experiment(&cfg, seed)?;
            print!("{}", record.to_csv());
            println!(
                "# converged={} rounds={} final_accuracy={:.4} total_objective={:.4}",
                record.converged, record.rounds, record.final_accuracy, record.total_objective
            );
            if let Some(dir) = &cfg.output_dir {
                let manifest = manifest_for(&cfg, seed, &record)?;
                write_atomic(&dir.join("rounds.csv"), &record.to_csv())?;
                let json = serde_json::to_string_pretty(&manifest)
                    .map_err(|e| Error::Serde(format!("manifest serialize: {e}")))?;
                write_atomic(&dir.join("manifest.json"), &json)?;
                println!("# wrote rounds.csv and manifest.json to {}", dir.display());
            }
        }
        Command::Sweep {
            config,
            repetitions,
            out,
        } => {
            let mut configs = Vec::with_capacity(config.len());
            for path in &config {
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                configs.push((label, ExperimentConfig::load(path)?));
            }
            let (rows, errors) = sweep(&configs, repetitions)?;
            let mut csv = String::from(SweepRow::csv_header());
            for row in &rows {
                csv.push('\n');
                csv.push_str(&row.csv_row());
            }
            csv.push('\n');
            write_atomic(&out, &csv)?;
            print!("{csv}");
            for e in &errors {
                eprintln!("warning: failed run: {e}");
            }
            if !errors.is_empty() {
                return Err(Error::Config(format!(
                    "{} of {} runs failed",
                    errors.len(),
                    configs.len() * repetitions
                )));
            }
        }
        Command::CompareAssign {
            devices,
            edges,
            instances,
            seed,
            exhaustive,
            agent,
            out,
        } => {
            let loaded = agent.as_deref().map(load_checkpoint).transpose()?;
            let mut strategies = vec![Strategy::Geographic, Strategy::Hfel(Budgets::default())];
            if exhaustive {
                strategies.push(Strategy::Exhaustive);
            }
            if let Some(a) = &loaded {
                strategies.push(Strategy::Drl(a));
            }
            let topo_cfg = TopologyConfig {
                n_devices: devices,
                n_edges: edges,
                side_length: 1000.0,
            };
            let (rows, _) = compare_assignment(
                instances,
                &strategies,
                &topo_cfg,
                &ParamRanges::default(),
                &CostParams::default(),
                1e-4,
                seed,
            )?;
            let mut csv = String::from(CompareRow::csv_header());
            for row in &rows {
                csv.push('\n');
                csv.push_str(&row.csv_row());
            }
            csv.push('\n');
            write_atomic(&out, &csv)?;
            print!("{csv}");
        }
        Command::ClusterEval {
            config,
            full_kb,
            mini_kb,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.run.base_seed);
            let report = cluster_eval(&cfg, full_kb * BITS_PER_KB, mini_kb * BITS_PER_KB, seed)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Serde(format!("report serialize: {e}")))?;
            println!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
