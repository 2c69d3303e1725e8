//! Command-line driver: `evolve`, `classify`, `interval`, `characteristics` and `action`.
//!
//! Exit status: 0 when a run reaches a terminal outcome, 2 on usage, config or IO errors, 3 when a
//! run is inconclusive (no terminal outcome, no bounded level, or a penalty-dominated action query).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{parse_point, parse_sweep, ActionKindArg, Status};

#[derive(Parser)]
#[command(name = "contact-hj", version, about = "Solution semigroups and admissible levels of contact Hamilton-Jacobi equations on the torus")]
struct Cli {
    /// Run configuration (TOML, or JSON by extension)
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Long-time evolution of the backward semigroup at level c
    Evolve {
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        c: f64,
        /// const:K, sin, or a CSV file with one value per node
        #[arg(long, default_value = "const:0")]
        initial: String,
    },
    /// Boundedness of the semigroup at one level or a sweep of levels
    Classify {
        #[arg(long, allow_hyphen_values = true, conflicts_with = "sweep", required_unless_present = "sweep")]
        c: Option<f64>,
        /// lo:hi:n, classified concurrently
        #[arg(long, allow_hyphen_values = true)]
        sweep: Option<String>,
    },
    /// Brackets for both endpoints plus the min-max and max-min estimates
    Interval,
    /// Characteristic orbit through (x, u, p)
    Characteristics {
        /// x or x1,x2
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        #[arg(long, allow_hyphen_values = true)]
        u: f64,
        /// p or p1,p2
        #[arg(long, allow_hyphen_values = true)]
        p: String,
        /// Negative spans integrate backward
        #[arg(long, allow_hyphen_values = true)]
        t_span: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        c: f64,
    },
    /// Implicit action function from (x0, u0) evaluated at query points
    Action {
        #[arg(long, value_enum, default_value = "forward")]
        kind: ActionKindArg,
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        u0: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        c: f64,
        #[arg(long)]
        t: f64,
        /// Query point (repeatable); defaults to x0
        #[arg(long, allow_hyphen_values = true)]
        query: Vec<String>,
        /// Also write the backtracked minimizer for every query
        #[arg(long)]
        curve: bool,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CONTACT_HJ_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("CONTACT_HJ_THREADS = {v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Status> {
    configure_threads()?;
    let path = cli.config.ok_or_else(|| anyhow::anyhow!("--config is required"))?;
    let cfg = config::load(&path)?.resolve()?;
    let dim = cfg.grid.dim();
    match cli.command {
        Command::Evolve { c, initial } => commands::evolve_cmd(&cfg, c, &initial),
        Command::Classify { c, sweep } => match (c, sweep) {
            (_, Some(s)) => commands::classify_cmd(&cfg, parse_sweep(&s)?, true),
            (Some(c), None) => commands::classify_cmd(&cfg, vec![c], false),
            (None, None) => unreachable!("clap requires --c or --sweep"),
        },
        Command::Interval => commands::interval_cmd(&cfg),
        Command::Characteristics { x, u, p, t_span, c } => {
            commands::characteristics_cmd(&cfg, parse_point(&x, dim)?, u, parse_point(&p, dim)?, t_span, c)
        }
        Command::Action { kind, x0, u0, c, t, query, curve } => {
            let x0 = parse_point(&x0, dim)?;
            let queries = if query.is_empty() {
                vec![x0]
            } else {
                query.iter().map(|q| parse_point(q, dim)).collect::<Result<_>>()?
            };
            commands::action_cmd(&cfg, kind, x0, u0, c, t, &queries, curve)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Terminal) => ExitCode::SUCCESS,
        Ok(Status::Inconclusive) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
