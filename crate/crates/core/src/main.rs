use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use meta_nssm::experiments::{
    cmd_adapt, cmd_make_source, cmd_meta_train, cmd_report, cmd_study, cmd_track, ExperimentConfig,
};
use meta_nssm::meta::Algorithm;
use meta_nssm::plants::PlantKind;
use meta_nssm::Result;

#[derive(Parser)]
#[command(name = "meta-nssm", about = "Meta-learned neural state-space models for MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration for a plant as JSON.
    InitConfig {
        #[arg(long, value_parser = parse_plant)]
        plant: PlantKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample source and target systems and write their datasets.
    MakeSource {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train an initialization on the source datasets.
    MetaTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        algorithm: Algorithm,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Continue from OUT/resume.json when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Adapt a checkpoint (or a random initialization) to the target data.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        algorithm: Algorithm,
        /// Defaults to adapt.steps from the config.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop reference tracking on the target plant.
    Track {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate every records.csv below a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Whole pipeline over the configured (or given) seeds.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
    },
}

fn parse_plant(s: &str) -> std::result::Result<PlantKind, String> {
    match s {
        "vdp" => Ok(PlantKind::Vdp),
        "pendulum" => Ok(PlantKind::Pendulum),
        other => Err(format!("unknown plant {other:?} (vdp, pendulum)")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { plant, out } => {
            let cfg = ExperimentConfig::default_for(plant);
            match out {
                Some(path) => cfg.save(&path)?,
                None => println!("{}", cfg.to_json()),
            }
        }
        Command::MakeSource { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = cmd_make_source(&cfg, seed, &out)?;
            log::info!("wrote {} source datasets to {}", data.sources.len(), out.display());
        }
        Command::MetaTrain {
            config,
            data,
            algorithm,
            seed,
            out,
            resume,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let state = cmd_meta_train(&cfg, &data, algorithm, seed, &out, resume)?;
            if let Some(last) = state.metrics.last() {
                log::info!("finished {} iterations, mean test loss {:.6}", state.iter, last.mean_test_loss);
            }
        }
        Command::Adapt {
            config,
            checkpoint,
            data,
            algorithm,
            steps,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let steps = steps.unwrap_or(cfg.adapt.steps);
            let outcome = cmd_adapt(&cfg, checkpoint.as_deref(), &data, algorithm, steps, seed, &out)?;
            if let Some((s, l)) = outcome.losses.last() {
                log::info!("target loss {l:.6} after {s} steps");
            }
        }
        Command::Track {
            config,
            checkpoint,
            data,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ep = cmd_track(&cfg, &checkpoint, &data, seed, &out)?;
            let s = ep.summary();
            println!("mean_err {:?} final_err {:?} violations {}", s.mean_err, s.final_err, s.constraint_violations);
        }
        Command::Report { out } => {
            for row in cmd_report(&out)? {
                println!(
                    "{} steps={} {} n={} mean={:?} std={:?}",
                    row.algorithm, row.adapt_steps, row.metric, row.n, row.mean, row.std
                );
            }
        }
        Command::Study { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds = if seed.is_empty() { cfg.seeds.clone() } else { seed };
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            for row in cmd_study(&cfg, &seeds, &out)? {
                println!(
                    "{} steps={} {} n={} mean={:?} std={:?}",
                    row.algorithm, row.adapt_steps, row.metric, row.n, row.mean, row.std
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
