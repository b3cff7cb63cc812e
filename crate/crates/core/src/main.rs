use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualtrack::beamform::BfMode;
use dualtrack::harness::{self, SchemeSelection, SimConfig};

#[derive(Parser)]
#[command(name = "dualtrack", about = "Map-aided ISAC vehicle tracking simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a Monte Carlo experiment.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scheme: Option<SchemeSelection>,
        #[arg(long = "bf-mode")]
        bf_mode: Option<BfMode>,
    },
    /// Repeat an experiment over values of one numeric parameter.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Option<PathBuf>) -> dualtrack::Result<SimConfig> {
    match path {
        Some(p) => SimConfig::load(p),
        None => Ok(SimConfig::default()),
    }
}

fn run(cli: Cli) -> dualtrack::Result<()> {
    match cli.cmd {
        Cmd::Simulate {
            config,
            out,
            runs,
            seed,
            scheme,
            bf_mode,
        } => {
            let mut cfg = load(&config)?;
            if let Some(r) = runs {
                cfg.runs = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = scheme {
                cfg.scheme = s;
            }
            if let Some(m) = bf_mode {
                cfg.bf_mode = m;
            }
            let exp = harness::run_experiment(&cfg)?;
            harness::write_outputs(&exp, &out)?;
            for s in &exp.summaries {
                println!(
                    "{}: final RMSE {:.4} m, mean RMSE {:.4} m",
                    s.scheme.as_str(),
                    s.final_rmse,
                    s.mean_rmse
                );
                for p in &s.paths {
                    if let Some(e) = p.mean_error_deg {
                        println!("  path {}: mean AoA error {:.4} deg", p.path_id, e);
                    }
                }
            }
        }
        Cmd::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let cfg = load(&config)?;
            let pts = harness::sweep(&cfg, &param, &values)?;
            harness::write_sweep(&pts, &param, cfg.scene.n_paths(), &out)?;
            println!("{} points written to {}", pts.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
