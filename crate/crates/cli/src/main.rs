//! `vortexline`: nodal lines, X-lines, invariant manifolds and chaos
//! diagnostics for Bohmian flows of 3-d harmonic-oscillator superpositions.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::Vector3;

use vortexline_cli::commands::{self, Ctx, Outcome};
use vortexline_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "vortexline",
    version,
    about = "Nodal-line vortex structure and Bohmian chaos diagnostics"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Time for the structural commands (overrides config).
    #[arg(long, global = true)]
    t: Option<f64>,
    /// Seed point "X,Y,Z": nodal seed for line commands, initial condition
    /// for trajectory/chaos.
    #[arg(long, global = true, value_parser = parse_seed)]
    seed: Option<Seed>,
    /// Worker threads (default: all cores; env VORTEXLINE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug)]
struct Seed([f64; 3]);

fn parse_seed(s: &str) -> Result<Seed, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected X,Y,Z".into());
    }
    let mut out = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("bad component {p:?}: {e}"))?;
    }
    Ok(Seed(out))
}

#[derive(Subcommand)]
enum Command {
    /// Sample |Psi|^2, phase and velocity on a grid slice.
    Field,
    /// Trace nodal lines at the configured time.
    Nodal,
    /// Per-node complex diagnostics (A, <f3>, fast-node margin, type).
    Npxpc,
    /// X-points along each nodal line.
    Xline,
    /// Invariant-manifold branches of sampled X-points.
    Manifolds,
    /// Bohmian trajectory with deviation vector.
    Trajectory,
    /// Full chaos pipeline: stretching numbers, X-line distance, events.
    Chaos,
    /// <f3> sign-change scan (Hopf bifurcations) in space or time.
    HopfScan,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("VORTEXLINE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: thread pool init failed: {e}");
        }
    }

    let mut cfg = match &cli.config {
        Some(path) => match RunConfig::from_path(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => RunConfig::default(),
    };
    if let Some(t) = cli.t {
        cfg.t = t;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }

    let out = PathBuf::from(&cfg.out_dir);
    if let Err(e) = std::fs::create_dir_all(&out) {
        eprintln!("error: cannot create output dir {}: {e}", out.display());
        return ExitCode::from(1);
    }
    let ctx = Ctx {
        cfg: &cfg,
        out: &out,
        seed: cli.seed.map(|s| Vector3::from(s.0)),
    };

    let result = match cli.command {
        Command::Field => commands::cmd_field(&ctx),
        Command::Nodal => commands::cmd_nodal(&ctx),
        Command::Npxpc => commands::cmd_npxpc(&ctx),
        Command::Xline => commands::cmd_xline(&ctx),
        Command::Manifolds => commands::cmd_manifolds(&ctx),
        Command::Trajectory => commands::cmd_trajectory(&ctx),
        Command::Chaos => commands::cmd_chaos(&ctx),
        Command::HopfScan => commands::cmd_hopf_scan(&ctx),
    };

    match result {
        Ok(Outcome::Complete) => ExitCode::from(0),
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
