use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use cms::cli::{run, Command};
use cms::config::{builtin_family, RunConfig};
use cms::entropy::Units;
use cms::CmsError;

/// Simulation and entropy estimation for contractive Markov systems.
///
/// Exit status: 0 when every check passes, 1 when any check fails, 2 on
/// input or configuration errors.
#[derive(Debug, Parser)]
#[command(name = "cms", version)]
struct Args {
    /// validate, contraction, invariant, entropy, coding, lemma2 or report
    #[arg(value_parser = parse_command)]
    command: Command,
    /// TOML run config, or a JSON report whose config is rerun
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in system: planar_affine_trig, finite_chain or bernoulli_ifs
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    units: Option<UnitsArg>,
    /// Directory for report.json and CSV side files
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum UnitsArg {
    Nats,
    Bits,
}

fn parse_command(s: &str) -> Result<Command, String> {
    s.parse().map_err(|e: CmsError| e.to_string())
}

fn load_config(args: &Args) -> cms::Result<RunConfig> {
    let mut cfg = match (&args.config, &args.system) {
        (Some(path), _) => RunConfig::from_path(path)?,
        (None, Some(name)) => {
            let seed = args.seed.ok_or_else(|| {
                CmsError::Config("a seed is required: pass --seed or use --config".into())
            })?;
            RunConfig::builtin(name, seed)?
        }
        (None, None) => {
            return Err(CmsError::Config(
                "pass --config <path> or --system <name>".into(),
            ))
        }
    };
    if let (Some(_), Some(name)) = (&args.config, &args.system) {
        cfg.system = builtin_family(name)?;
        cfg.certificates = None;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(u) = args.units {
        cfg.units = match u {
            UnitsArg::Nats => Units::Nats,
            UnitsArg::Bits => Units::Bits,
        };
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let outcome = load_config(&args).and_then(|cfg| {
        let output = run(&cfg, args.command)?;
        if let Some(dir) = &args.out {
            output.write_to(dir)?;
        }
        Ok(output)
    });
    match outcome {
        Ok(output) => {
            let report = &output.report;
            match report.to_json_pretty() {
                Ok(json) => println!("{json}"),
                Err(e) => {
                    eprintln!("cms: {e}");
                    return ExitCode::from(2);
                }
            }
            if let Some(d) = &report.verdict.diagnostic {
                eprintln!("cms: {d}");
            }
            if report.verdict.passed {
                eprintln!("cms {}: pass", report.command);
                ExitCode::SUCCESS
            } else {
                eprintln!(
                    "cms {}: FAIL ({})",
                    report.command,
                    report.verdict.failures.join(", ")
                );
                ExitCode::from(1)
            }
        }
        Err(e @ CmsError::Integrity(_)) => {
            eprintln!("cms: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("cms: {e}");
            ExitCode::from(2)
        }
    }
}
