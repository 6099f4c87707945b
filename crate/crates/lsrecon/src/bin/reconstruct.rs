//! Batch surface reconstruction from a point cloud.
//!
//! Usage: `reconstruct <config.json> [flags]`. Flags override the
//! matching config keys. Exit codes: 0 success, 2 configuration error,
//! 3 numerical failure, 4 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use lsrecon::error::PipelineError;
use lsrecon::pipeline::{run, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "reconstruct", about = "Level-set surface reconstruction from point clouds")]
struct Cli {
    /// JSON configuration file (a flat object; unknown keys are fatal).
    config: PathBuf,

    /// Point-cloud file (.xyz or .ply).
    #[arg(long)]
    input: Option<PathBuf>,

    /// Output directory.
    #[arg(long)]
    outdir: Option<PathBuf>,

    /// Number of consecutive runs at doubling resolution.
    #[arg(long)]
    runs: Option<u32>,

    /// Grid-size constant: first run targets dx = cs * cloud resolution.
    #[arg(long)]
    cs: Option<f64>,

    /// Domain half-width M.
    #[arg(long = "domain-halfwidth")]
    domain_halfwidth: Option<f64>,

    /// Cavity mode: on | off.
    #[arg(long)]
    cavity: Option<String>,

    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,

    /// Comma-separated export toggles: vtk,csv,obj.
    #[arg(long)]
    export: Option<String>,

    /// Exact SDF for synthetic error reporting:
    /// circle | sphere | square | cube-spheres.
    #[arg(long)]
    exact: Option<String>,
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let text = std::fs::read_to_string(&cli.config).map_err(|source| PipelineError::Io {
        path: cli.config.clone(),
        source,
    })?;
    let mut cfg = RunConfig::from_json(&text)?;
    if let Some(v) = &cli.input {
        cfg.input = Some(v.clone());
    }
    if let Some(v) = &cli.outdir {
        cfg.outdir = Some(v.clone());
    }
    if let Some(v) = cli.runs {
        cfg.runs = v;
    }
    if let Some(v) = cli.cs {
        cfg.cs = v;
    }
    if let Some(v) = cli.domain_halfwidth {
        cfg.domain_half_width = v;
    }
    if let Some(v) = &cli.cavity {
        cfg.cavity_mode = match v.as_str() {
            "on" => true,
            "off" => false,
            other => {
                return Err(PipelineError::Config(format!(
                    "--cavity expects on|off, got {other}"
                )))
            }
        };
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.workers {
        cfg.workers = v;
    }
    if let Some(v) = &cli.export {
        cfg.exports = v.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(v) = &cli.exact {
        cfg.exact = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("reconstruct: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cfg) {
        Ok(report) => {
            for s in &report.runs {
                println!(
                    "run {}: {} iterations ({}), dx_min {:.5}, ErrS {:.4e}{}",
                    s.r,
                    s.iterations,
                    s.stop_reason,
                    s.dx_min,
                    s.err_s,
                    s.err_1
                        .map(|v| format!(", Err1 {v:.4e}"))
                        .unwrap_or_default(),
                );
            }
            println!("total iterations: {}", report.total_iterations);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("reconstruct: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
