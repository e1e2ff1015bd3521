use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use splitfrozen::harness::{run_experiment, run_simulation, write_partitions, ExperimentConfig, Overrides};
use splitfrozen::scheduler::{render_svg, PipelineSchedule, Scheme};

/// Split fine-tuning with frozen device layers: experiment runner.
#[derive(Parser)]
#[command(name = "splitfrozen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file, or `paper.gpt2` for the shipped preset.
    config: String,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to these schemes (repeatable).
    #[arg(long = "scheme")]
    schemes: Vec<Scheme>,
}

impl Common {
    fn load(&self) -> splitfrozen::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            schemes: self.schemes.clone(),
        }
        .apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Toy runs plus schedule simulation; writes reports, charts and manifests.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write protocol frame logs under `frames/`.
        #[arg(long)]
        record: bool,
    },
    /// Schedules and Gantt charts only.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Shard manifests only.
    Partition {
        #[command(flatten)]
        common: Common,
    },
    /// Re-render a schedule JSON file as SVG.
    Gantt {
        schedule: PathBuf,
        /// SVG path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config.
    Validate { config: String },
}

fn execute(cmd: Command) -> splitfrozen::Result<()> {
    match cmd {
        Command::Run { common, record } => {
            let cfg = common.load()?;
            let out = run_experiment(&cfg, record)?;
            println!(
                "{:<12} {:<16} {:>6} {:>14} {:>12} {:>12} {:>10}",
                "scheme", "data", "seed", "dev_flops/smp", "dev_time_s", "total_s", "loss"
            );
            for r in &out.report.rows {
                println!(
                    "{:<12} {:<16} {:>6} {:>14.4e} {:>12.4} {:>12.4} {:>10.5}",
                    r.scheme.name(),
                    r.data_mode,
                    r.seed,
                    r.device_flops_per_sample,
                    r.device_time_s,
                    r.total_time_s,
                    r.final_loss
                );
            }
            println!(
                "times are simulated seconds per epoch; report in {}",
                out.out_dir.display()
            );
        }
        Command::Simulate { common } => {
            let cfg = common.load()?;
            for r in run_simulation(&cfg)? {
                println!(
                    "{:<12} device_flops/sample {:.4e}  device_time {:.4} s  total_time {:.4} s (simulated)",
                    r.scheme.name(),
                    r.device_flops_per_sample,
                    r.device_time,
                    r.total_time
                );
            }
        }
        Command::Partition { common } => {
            let cfg = common.load()?;
            for p in write_partitions(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Gantt { schedule, out } => {
            let text = fs::read_to_string(&schedule)?;
            let svg = render_svg(&PipelineSchedule::from_json(&text)?);
            match out {
                Some(p) => fs::write(p, svg)?,
                None => print!("{svg}"),
            }
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!(
                "{}: ok ({} schemes, {} devices)",
                cfg.name,
                cfg.schemes.len(),
                cfg.cluster.devices.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
