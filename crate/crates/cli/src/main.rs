use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use netmarl_cli::{analyze, run, sweep, verify, CliError, LoadedConfig, Options, Outcome};
use netmarl_core::zoo::Variant;

/// Networked multi-agent zeroth-order policy optimization.
#[derive(Parser)]
#[command(name = "netmarl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learning sets, clusters, distances, truncation tables and assumption verdicts.
    Analyze(Common),
    /// Train the configured variants on every seed.
    Run(Common),
    /// Run the numerical check suite.
    Verify(Common),
    /// Train the truncated variant for each kappa and tabulate the results.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed (overrides the configuration).
    #[arg(long, env = "NETMARL_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "NETMARL_JOBS")]
    jobs: Option<usize>,
    /// Run variants whose assumption checks fail.
    #[arg(long)]
    force: bool,
    /// Restrict to this variant (repeatable): centralized, distributed-lvf, distributed-tlvf.
    #[arg(long = "variant", value_parser = parse_variant)]
    variants: Vec<Variant>,
    /// Comma-separated truncation indices.
    #[arg(long, value_delimiter = ',')]
    kappa: Option<Vec<usize>>,
    /// Record wall-clock time per episode in traces.
    #[arg(long)]
    wallclock: bool,
    /// Include self-loops in serialized learning edges.
    #[arg(long)]
    self_loops: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant '{s}' (expected one of {})", names.join(", "))
    })
}

impl Common {
    fn options(&self) -> Options {
        Options {
            out: self.out.clone(),
            seed: self.seed,
            jobs: self.jobs,
            force: self.force,
            variants: self.variants.clone(),
            kappa: self.kappa.clone(),
            wallclock: self.wallclock,
            self_loops: self.self_loops,
        }
    }
}

type Handler = fn(&LoadedConfig, &Options) -> Result<Outcome, CliError>;

fn dispatch(cmd: &Command) -> Result<Outcome, CliError> {
    let (common, f): (&Common, Handler) = match cmd {
        Command::Analyze(c) => (c, analyze::cmd_analyze),
        Command::Run(c) => (c, run::cmd_run),
        Command::Verify(c) => (c, verify::cmd_verify),
        Command::Sweep(c) => (c, sweep::cmd_sweep),
    };
    let loaded = LoadedConfig::from_path(&common.config)?;
    f(&loaded, &common.options())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli.command) {
        Ok(o) => {
            for f in &o.files {
                println!("wrote {}", f.display());
            }
            if o.exit_code == 0 {
                println!("{}", o.message);
            } else {
                eprintln!("{}", o.message);
            }
            ExitCode::from(o.exit_code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
