//! `specrg`: runs engine scenarios and writes plot-ready CSV/JSON.
//!
//! Exit codes: 0 when every assertion passed, 1 when one failed or the
//! engine stopped, 2 for bad arguments or configuration.

mod commands;
mod config;
mod error;
mod output;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Check, FlowMode, ScenarioConfig, SweepAxis};
use error::CliError;
use output::{pretty, summary_path, write_atomic, Format, Outcome, Summary};

/// Overrides the default output directory.
const OUT_DIR_ENV: &str = "SPECRG_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "specrg-out";

#[derive(Parser, Debug)]
#[command(name = "specrg", version, about = "Smooth-Feshbach renormalization scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON scenario file; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Data file; the summary goes next to it as `<stem>.summary.json`. For
    /// `run`, the summary file itself.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Args, Debug, Default)]
struct PhysOverrides {
    #[arg(long)]
    g: Option<f64>,
    /// Momentum `|p|`.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Randomized identity suite of the Feshbach map.
    FeshbachSelftest {
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Continuum toy model over a list of infrared cutoffs.
    Toy {
        #[command(flatten)]
        phys: PhysOverrides,
        /// Comma-separated infrared cutoffs.
        #[arg(long, value_delimiter = ',')]
        sigma0: Option<Vec<f64>>,
    },
    /// Renormalization flow trace of the physical Hamiltonian.
    Flow {
        #[command(flatten)]
        phys: PhysOverrides,
        #[arg(long, value_enum)]
        mode: Option<FlowMode>,
        #[arg(long)]
        n_max: Option<usize>,
    },
    /// Running-coupling table.
    Scalarflow {
        #[command(flatten)]
        phys: PhysOverrides,
        #[arg(long)]
        sigma0: Option<f64>,
        #[arg(long)]
        n_max: Option<usize>,
    },
    /// Ward-type identity residuals per shell depth.
    WtCheck {
        #[command(flatten)]
        phys: PhysOverrides,
        /// Comma-separated shell counts.
        #[arg(long, value_delimiter = ',')]
        shells: Option<Vec<usize>>,
    },
    /// One-parameter sweep.
    Sweep {
        #[command(flatten)]
        phys: PhysOverrides,
        #[arg(long, value_enum)]
        axis: Option<SweepAxis>,
        /// Comma-separated values, at least 3.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Every check listed under `enabled` in the config.
    Run,
}

impl PhysOverrides {
    fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(g) = self.g {
            cfg.params.g = g;
        }
        if let Some(p) = self.p {
            cfg.params.p_abs = p;
        }
        if let Some(l) = self.lambda {
            cfg.params.lambda = l;
        }
    }
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match &cli.common.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.selftest.seed = s;
    }
    match &cli.command {
        Command::FeshbachSelftest { instances } => {
            if let Some(n) = instances {
                cfg.selftest.instances = *n;
            }
        }
        Command::Toy { phys, sigma0 } => {
            phys.apply(&mut cfg);
            if let Some(s) = sigma0 {
                cfg.toy.sigma0 = s.clone();
            }
        }
        Command::Flow { phys, mode, n_max } => {
            phys.apply(&mut cfg);
            if let Some(m) = mode {
                cfg.flow.mode = *m;
            }
            if n_max.is_some() {
                cfg.flow.n_max = *n_max;
            }
        }
        Command::Scalarflow { phys, sigma0, n_max } => {
            phys.apply(&mut cfg);
            if let Some(s) = sigma0 {
                cfg.params.sigma0 = *s;
            }
            if n_max.is_some() {
                cfg.scalar.n_max = *n_max;
            }
        }
        Command::WtCheck { phys, shells } => {
            phys.apply(&mut cfg);
            if let Some(s) = shells {
                cfg.wt.shells = s.clone();
                cfg.wt.propagate.retain(|n| s.contains(n));
            }
        }
        Command::Sweep { phys, axis, values } => {
            phys.apply(&mut cfg);
            if let Some(a) = axis {
                cfg.sweep.axis = *a;
            }
            if let Some(v) = values {
                cfg.sweep.values = v.clone();
            }
        }
        Command::Run => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_check(check: Check, cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    match check {
        Check::FeshbachSelftest => commands::feshbach_selftest(cfg),
        Check::Toy => commands::toy(cfg),
        Check::Flow => commands::flow(cfg),
        Check::Scalarflow => commands::scalarflow(cfg),
        Check::WtCheck => commands::wt_check(cfg),
    }
}

fn out_dir(cfg: &ScenarioConfig) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn default_format(command: &str) -> Format {
    match command {
        "feshbach-selftest" | "wt-check" => Format::Json,
        _ => Format::Csv,
    }
}

fn format_for(path: Option<&Path>, flag: Option<Format>, command: &str) -> Format {
    flag.or_else(|| match path?.extension()?.to_str()? {
        "json" => Some(Format::Json),
        "csv" => Some(Format::Csv),
        _ => None,
    })
    .unwrap_or_else(|| default_format(command))
}

fn report(outcomes: &[Outcome], quiet: bool) {
    for o in outcomes {
        for c in &o.checks {
            if !c.pass || !quiet {
                let verdict = if c.pass { "ok  " } else { "FAIL" };
                let rel = if c.upper_bound { "<=" } else { ">=" };
                eprintln!("{verdict} {:<18} {:<36} {:.3e} {rel} {:.3e}", o.command, c.identity, c.max_residual, c.threshold);
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<bool, CliError> {
    let cfg = load_config(cli)?;
    let dir = out_dir(&cfg);
    let common = &cli.common;
    let (label, outcomes) = match &cli.command {
        Command::Run => {
            let mut v = Vec::new();
            for &c in &cfg.enabled {
                let o = run_check(c, &cfg)?;
                let f = common.format.unwrap_or_else(|| default_format(o.command));
                write_atomic(&dir.join(format!("{}.{}", o.command, f.extension())), &o.render(f)?)?;
                v.push(o);
            }
            ("run", v)
        }
        cmd => {
            let o = match cmd {
                Command::FeshbachSelftest { .. } => run_check(Check::FeshbachSelftest, &cfg)?,
                Command::Toy { .. } => run_check(Check::Toy, &cfg)?,
                Command::Flow { .. } => run_check(Check::Flow, &cfg)?,
                Command::Scalarflow { .. } => run_check(Check::Scalarflow, &cfg)?,
                Command::WtCheck { .. } => run_check(Check::WtCheck, &cfg)?,
                Command::Sweep { .. } => sweep::sweep(&cfg)?,
                Command::Run => unreachable!(),
            };
            let f = format_for(common.out.as_deref(), common.format, o.command);
            let path = common.out.clone().unwrap_or_else(|| dir.join(format!("{}.{}", o.command, f.extension())));
            write_atomic(&path, &o.render(f)?)?;
            (o.command, vec![o])
        }
    };
    let summary = Summary::of(label, &outcomes);
    let spath = match (&cli.command, &common.out) {
        (Command::Run, Some(p)) => p.clone(),
        (_, Some(p)) => summary_path(p),
        (Command::Run, None) => dir.join("scenario.summary.json"),
        (_, None) => dir.join(format!("{label}.summary.json")),
    };
    write_atomic(&spath, &pretty(&summary)?)?;
    report(&outcomes, common.quiet);
    Ok(summary.pass)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("specrg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
