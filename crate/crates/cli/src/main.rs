//! `mbslab` command-line front end.
//!
//! Settings are layered: a preset (or the built-in defaults for a config
//! file) is overridden by the fields of a config file, which are in turn
//! overridden by command-line flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};

use clap::{Parser, Subcommand};
use mbslab::scenario::{self, Mode, ScenarioConfig};
use mbslab::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "mbslab", version, about = "1D Maxwell-Bloch FDTD for dense emitter slabs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset (fig2-low, fig2-mid, fig2-high, fig3, fig4, fig5) or a TOML config file.
    Run(RunArgs),
    /// List the built-in presets.
    Presets,
    /// Print the normalized config of a preset or config file.
    Show {
        target: String,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Preset name or path to a TOML config.
    target: String,
    /// Output directory (default: `output.directory`, else `out/<name>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cell size in metres.
    #[arg(long)]
    dz: Option<f64>,
    /// Courant number `c dt / dz`.
    #[arg(long)]
    courant: Option<f64>,
    /// Simulated time in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Skip the FDTD runs and write closed-form spectra only.
    #[arg(long)]
    analytic_only: bool,
    /// Suppress progress output on stderr.
    #[arg(long)]
    quiet: bool,
}

fn exit_code(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Config | ErrorClass::Io => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::PostProcessing => 4,
    }
}

fn load(target: &str) -> mbslab::Result<ScenarioConfig> {
    if scenario::PRESETS.contains(&target) {
        return scenario::preset(target);
    }
    let path = Path::new(target);
    if path.exists() {
        let mut cfg = ScenarioConfig::load(path)?;
        if cfg.name.is_none() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        return Ok(cfg);
    }
    scenario::preset(target)
}

fn apply_overrides(cfg: &mut ScenarioConfig, args: &RunArgs) {
    if let Some(dz) = args.dz {
        cfg.grid.dz = Some(dz);
    }
    if let Some(s) = args.courant {
        cfg.grid.courant = Some(s);
    }
    if let Some(d) = args.duration {
        cfg.grid.duration = Some(d);
        cfg.grid.duration_over_gamma = None;
    }
    if args.analytic_only {
        cfg.mode = Mode::AnalyticOnly;
    }
    if let Some(out) = &args.out {
        cfg.output.directory = Some(out.clone());
    }
}

fn run(args: &RunArgs) -> mbslab::Result<()> {
    let mut cfg = load(&args.target)?;
    apply_overrides(&mut cfg, args);
    let sc = cfg.resolve()?;
    let dir = sc
        .config
        .output
        .directory
        .clone()
        .unwrap_or_else(|| Path::new("out").join(&sc.name));

    let last_percent = AtomicU64::new(u64::MAX);
    let report = |label: &str, k: u64, n: u64| {
        let pct = if n == 0 { 100 } else { k * 100 / n };
        let key = pct / 10 + if label == "main" { 1000 } else { 0 };
        if last_percent.swap(key, Ordering::Relaxed) != key {
            eprintln!("[{label}] {pct:3}% ({k}/{n} steps)");
        }
    };
    let outcome = if args.quiet {
        scenario::execute(&sc, &scenario::no_progress)?
    } else {
        scenario::execute(&sc, &report)?
    };
    scenario::write_outputs(&outcome, &dir)?;
    print!("{}", outcome.summary);
    println!("output_directory={}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Presets => {
            for p in scenario::PRESETS {
                println!("{p}");
            }
            Ok(())
        }
        Command::Show { target } => load(target)
            .and_then(|c| c.normalize())
            .and_then(|c| c.to_toml_string())
            .map(|t| print!("{t}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
