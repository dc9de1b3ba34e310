use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moe_dmft::cli::{self, Overrides, RunConfig, EXIT_CHECK_FAILED, EXIT_CONFIG};
use moe_dmft::volterra::Tolerance;
use moe_dmft::Error;

#[derive(Parser)]
#[command(name = "moe-dmft", version, about = "Mixture-of-experts training dynamics and mean-field solver")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for one per core.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its trace and kernels.
    Train(Common),
    /// Check the telescoping and Volterra identities of a trace.
    Verify {
        trace: PathBuf,
        /// Per-step absolute tolerance.
        #[arg(long, default_value_t = Tolerance::default().per_step)]
        per_step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Solve the mean-field fixed point.
    Dmft(Common),
    /// Run a size sweep with fits.
    Sweep(Common),
    /// Gap table between finite kernel tables and a mean-field table.
    Compare {
        /// Finite-size kernel tables, averaged entrywise.
        #[arg(long, required = true)]
        finite: Vec<PathBuf>,
        #[arg(long)]
        dmft: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Fail when a checked relative gap exceeds this.
        #[arg(long)]
        tol: Option<f64>,
        /// Rows held to `--tol`; all rows when omitted.
        #[arg(long)]
        check: Vec<String>,
    },
}

fn threads(n: Option<usize>) -> Result<(), Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.unwrap_or(0))
        .build_global()
        .map_err(|e| Error::config(e.to_string()))
}

fn load(c: &Common) -> Result<RunConfig, Error> {
    let cfg = RunConfig::load(&c.config, &Overrides { seed: c.seed, out: c.out.clone(), threads: c.threads })?;
    threads(Some(cfg.threads))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.cmd {
        Command::Train(c) => cli::cmd_train(&load(&c)?),
        Command::Dmft(c) => cli::cmd_dmft(&load(&c)?),
        Command::Sweep(c) => cli::cmd_sweep(&load(&c)?),
        Command::Verify { trace, per_step, out, threads: t } => {
            threads(t)?;
            cli::cmd_verify(&trace, Tolerance { per_step }, out.as_deref())
        }
        Command::Compare { finite, dmft, out, tol, check } => {
            let (rows, code) = cli::cmd_compare(&finite, &dmft, &out, tol, &check)?;
            println!("kernel,entries,max_abs,max_rel");
            for r in rows {
                println!("{},{},{:e},{:e}", r.kernel, r.entries, r.max_abs, r.max_rel);
            }
            Ok(code)
        }
    }
}

fn main() -> ExitCode {
    let code = match run(Cli::parse()) {
        Ok(c) => c,
        Err(e @ Error::Config(_)) => {
            eprintln!("{e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("{e}");
            EXIT_CHECK_FAILED
        }
    };
    ExitCode::from(code as u8)
}
