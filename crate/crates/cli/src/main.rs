use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use goodspeed::experiments::{self, presets, ExperimentConfig, SweepParam, TraceFormat};
use goodspeed::Error;

/// Speculative-decoding scheduling simulator.
#[derive(Parser)]
#[command(name = "goodspeed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured scheduler; print a JSON summary.
    Run(Common),
    /// Solve for the optimal goodput vector x*.
    Oracle(Common),
    /// Run every scheduler listed under `compare` on the same seed.
    Compare(Common),
    /// Rerun the config once per value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: Param,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Trace format (overrides `output.formats`).
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Beta,
    Eta,
    Capacity,
    Clients,
}

impl From<Param> for SweepParam {
    fn from(p: Param) -> Self {
        match p {
            Param::Beta => SweepParam::Beta,
            Param::Eta => SweepParam::Eta,
            Param::Capacity => SweepParam::Capacity,
            Param::Clients => SweepParam::Clients,
        }
    }
}

impl Common {
    fn load(&self) -> goodspeed::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => presets::preset(name)?,
            (None, None) => unreachable!("clap requires one of --config/--preset"),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(f) = self.format {
            cfg.output.formats = vec![match f {
                Format::Csv => TraceFormat::Csv,
                Format::Jsonl => TraceFormat::Jsonl,
            }];
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.display().to_string();
        }
        cfg.validate()?;
        let dir = PathBuf::from(&cfg.output.dir);
        Ok((cfg, dir))
    }
}

fn execute(cli: Cli) -> goodspeed::Result<ExitCode> {
    match cli.command {
        Command::Run(c) => {
            let (cfg, dir) = c.load()?;
            println!("{}", experiments::cmd_run(&cfg, &dir)?.to_json());
        }
        Command::Oracle(c) => {
            let (cfg, dir) = c.load()?;
            let report = experiments::cmd_oracle(&cfg, &dir)?;
            println!("{}", report.to_json());
            if !report.body.converged {
                eprintln!(
                    "error: Frank-Wolfe gap {} above tolerance {}",
                    report.body.fw_gap, report.body.gap_tol
                );
                return Ok(ExitCode::from(1));
            }
        }
        Command::Compare(c) => {
            let (cfg, dir) = c.load()?;
            println!("{}", experiments::cmd_compare(&cfg, &dir)?.to_json());
        }
        Command::Sweep { common, param, values } => {
            let (cfg, dir) = common.load()?;
            println!(
                "{}",
                experiments::cmd_sweep(&cfg, param.into(), &values, &dir)?.to_json()
            );
        }
        Command::Presets => {
            for name in presets::names() {
                println!("{name}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
