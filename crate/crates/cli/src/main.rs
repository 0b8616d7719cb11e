//! Command-line front end for the Auto-Spikformer engine.
//!
//! One command per process. Exit codes: 0 success, 1 usage/config
//! error, 2 data error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use autospikformer::error::Error;
use autospikformer::pipeline::{
    cmd_energy, cmd_evaluate, cmd_report, cmd_search, cmd_train, DataConfig, RunConfig,
};

const FITNESS_NOTE: &str = "Fitness is alpha * (1 - scaled energy) + (1 - alpha) * scaled accuracy, \
with accuracy and energy min-max rescaled over all evaluated candidates each generation. \
The signs are chosen so that higher accuracy and lower energy both raise fitness; the \
originally published formula rewards the opposite and is deliberately not reproduced.";

#[derive(Parser)]
#[command(
    name = "autospikformer",
    version,
    about = "Spiking-transformer supernet training and accuracy/energy-balanced architecture search"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

/// Overrides shared by the config-driven commands. Values given here
/// replace the corresponding fields of the JSON config file.
#[derive(Args)]
struct ConfigArgs {
    /// Path to the JSON run config (schema documented in the library).
    #[arg(long)]
    config: PathBuf,
    /// Search space: s_ts, s_tl or s_s.
    #[arg(long)]
    space: Option<String>,
    /// Inline JSON dataset spec, e.g.
    /// '{"kind":"synthetic","classes":3,"size":16,"per_class":50}'.
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Master seed; sets the data, training and search seeds together.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut config = RunConfig::from_file(&self.config)?;
        if let Some(space) = &self.space {
            config.space = space.parse()?;
        }
        if let Some(data) = &self.data {
            config.data = serde_json::from_str::<DataConfig>(data)
                .map_err(|e| Error::Config(format!("--data: {e}")))?;
        }
        if let Some(ckpt) = &self.ckpt {
            config.checkpoint_dir = ckpt.clone();
        }
        if let Some(seed) = self.seed {
            config.override_seed(seed);
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the supernet, checkpointing every epoch (resumable).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evolutionary search over the trained supernet.
    #[command(after_help = FITNESS_NOTE)]
    Search {
        #[command(flatten)]
        config: ConfigArgs,
        /// Hard cap on candidate evaluations.
        #[arg(long)]
        budget: Option<usize>,
        /// Top-k records by fitness that parent each generation.
        #[arg(long)]
        top: Option<usize>,
        /// Energy weight in the fitness (see note below).
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        generations: Option<usize>,
        #[arg(long)]
        population: Option<usize>,
        /// Random sampling at the same budget instead of evolution.
        #[arg(long)]
        baseline: bool,
        /// Results JSONL path (appended to).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one candidate with inherited weights and recalibrated BN.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Candidate as a parenthesized tuple, e.g. the SNN baseline
        /// "(1.0, 1.0, 1.0, 1.0, 2, 2, 2, 2, 4)".
        candidate: String,
        /// Also write the result JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Offline energy audit of an architecture against a firing-rate
    /// trace CSV; no model execution.
    Energy {
        /// Architecture as a candidate tuple string.
        arch: String,
        /// Trace CSV: layer_id,kind,flops,fr per line.
        trace: PathBuf,
        /// Simulation time steps (grid 2..4).
        #[arg(long, default_value_t = 4)]
        time_step: usize,
        /// Write the per-layer cost CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scatter SVG, Pareto-front CSV and Kendall-tau summary from a
    /// results JSONL.
    Report {
        /// Results JSONL produced by the search command.
        results: PathBuf,
        /// Report output directory.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Train { config } => {
            let config = config.load()?;
            let history = cmd_train(&config)?;
            match history.last() {
                Some(loss) => println!(
                    "trained {} epochs, final mean loss {loss}; checkpoint at {}",
                    history.len(),
                    config.checkpoint_dir.display()
                ),
                None => println!("nothing to do: checkpoint already at the configured epoch count"),
            }
            Ok(())
        }
        Cmd::Search { config, budget, top, alpha, generations, population, baseline, out } => {
            let mut config = config.load()?;
            if let Some(b) = budget {
                config.evo.total_sample_budget = Some(b);
            }
            if let Some(t) = top {
                config.evo.parent_count = t;
            }
            if let Some(a) = alpha {
                config.evo.alpha = a;
            }
            if let Some(g) = generations {
                config.evo.generations = g;
            }
            if let Some(p) = population {
                config.evo.population_size = p;
            }
            if let Some(out) = out {
                config.results_path = out;
            }
            let outcome = cmd_search(&config, baseline)?;
            let best = outcome
                .records
                .iter()
                .max_by(|a, b| a.fitness.total_cmp(&b.fitness))
                .expect("search returns at least one record");
            println!(
                "evaluated {} candidates ({}); records appended to {}",
                outcome.records.len(),
                if baseline { "random baseline" } else { "evolutionary" },
                outcome.results_path.display()
            );
            println!(
                "best fitness {:.4}: {} accuracy {:.4}, energy {:e} J",
                best.fitness, best.candidate, best.raw_accuracy, best.raw_energy
            );
            println!(
                "pareto front ({} candidates) written to {}",
                outcome.front.len(),
                outcome.front_csv_path.display()
            );
            Ok(())
        }
        Cmd::Evaluate { config, candidate, out } => {
            let config = config.load()?;
            let result = cmd_evaluate(&config, &candidate)?;
            println!("candidate  {}", result.candidate);
            println!("accuracy   {:.4}", result.accuracy);
            for entry in &result.fr_trace {
                println!("fr {:<18} {:.4}", entry.layer_id, entry.fr);
            }
            println!("energy     {:e} J", result.energy_joules);
            let json = serde_json::to_string_pretty(&result)
                .map_err(|e| Error::Data(format!("encoding result: {e}")))?;
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Cmd::Energy { arch, trace, time_step, out } => {
            let report = cmd_energy(&arch, &trace, time_step)?;
            let csv = report.to_csv();
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            println!("first-layer MACs {}", report.first_layer_flops);
            println!("total energy {:e} J", report.total_energy);
            Ok(())
        }
        Cmd::Report { results, out } => {
            let summary = cmd_report(&results, &out)?;
            println!("{} records; kendall tau(accuracy, energy) = {:.4}", summary.record_count, summary.tau);
            println!("scatter: {}", summary.svg_path.display());
            println!("front:   {} ({} candidates)", summary.front_csv_path.display(), summary.front.len());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Data(_) | Error::Io(_) => 2,
        Error::Numeric(_) | Error::Shape(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
