// SPDX-License-Identifier: Apache-2.0

//! `servas-sim`: scenario runner, analytics and image tool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use servas_core::cache::eviction::{
    eviction_grid, gnuplot_script, write_eviction_csv, EvictionMode, DEFAULT_TRIALS,
};
use servas_core::cache::overhead::{default_tc_configs, overhead_sweep, write_overhead_csv};
use servas_core::scenario::{
    builtin_suite, junit_report, parse_scenarios, run_scenario_traced, text_report, Scenario, SuiteResult,
};
use servas_core::tweak::TweakLayout;

mod image;

const EXIT_MISMATCH: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "servas-sim", version, about = "Simulator for tweaked memory encryption enclaves")]
struct Cli {
    /// Seed for keys and randomness.
    #[arg(long, global = true, env = "SERVAS_SIM_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run scenario scripts and compare verdicts with their expectations.
    Scenarios(ScenarioArgs),
    /// Monte Carlo tweak-cache eviction curves as CSV.
    Evictions(EvictionArgs),
    /// Tag storage of inline tweaks against a tweak cache, as CSV.
    Overhead(OverheadArgs),
    /// Build, unpack, encrypt and inspect enclave images.
    #[command(subcommand)]
    Image(image::ImageCmd),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportFormat {
    Text,
    Junit,
}

#[derive(clap::Args, Debug)]
struct ScenarioArgs {
    /// Scenario files to run instead of the built-in suite.
    #[arg(long = "file", value_name = "PATH")]
    files: Vec<PathBuf>,
    /// Run only the scenario with this name.
    #[arg(long)]
    only: Option<String>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print every step and its result to stderr.
    #[arg(long)]
    trace: bool,
    /// Write the final machine state of each scenario as JSON into this directory.
    #[arg(long, value_name = "DIR")]
    dump_state: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct EvictionArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [32u64, 128])]
    entries: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 4, 8])]
    ways: Vec<u64>,
    /// Largest number of tweaks inserted; every count from 1 up is reported.
    #[arg(long, default_value_t = 256)]
    max_tweaks: u64,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a gnuplot script for the CSV. Needs --out.
    #[arg(long, value_name = "PATH", requires = "out")]
    gnuplot: Option<PathBuf>,
    /// Statistic plotted by the gnuplot script.
    #[arg(long, default_value = "at_least_one")]
    plot_mode: EvictionMode,
}

#[derive(clap::Args, Debug)]
struct OverheadArgs {
    /// Virtual address width in bits, 7 to 48.
    #[arg(long, default_value_t = 48)]
    va_bits: u32,
    /// Smallest cache size as a power of two.
    #[arg(long, default_value_t = 4)]
    min_exp: u32,
    /// Largest cache size as a power of two.
    #[arg(long, default_value_t = 14)]
    max_exp: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure of a command: a message and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        Failure {
            code: EXIT_MISMATCH,
            msg: msg.into(),
        }
    }
}

pub fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| Failure::usage(format!("{}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Failure::usage(format!("stdout: {e}"))),
    }
}

fn load_scenarios(args: &ScenarioArgs) -> Result<Vec<Scenario>, Failure> {
    let mut all = if args.files.is_empty() {
        builtin_suite()
    } else {
        let mut v = Vec::new();
        for path in &args.files {
            let src = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            v.extend(parse_scenarios(&src).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?);
        }
        v
    };
    if let Some(name) = &args.only {
        all.retain(|s| &s.name == name);
        if all.is_empty() {
            return Err(Failure::usage(format!("no scenario named {name:?}")));
        }
    }
    Ok(all)
}

fn cmd_scenarios(args: &ScenarioArgs, seed: u64) -> Result<(), Failure> {
    let scenarios = load_scenarios(args)?;
    let suite = SuiteResult::run(&scenarios, seed);
    let report = match args.report {
        ReportFormat::Text => text_report(&suite),
        ReportFormat::Junit => junit_report(&suite),
    };
    write_output(args.out.as_deref(), report.as_bytes())?;

    if args.trace || args.dump_state.is_some() {
        if let Some(dir) = &args.dump_state {
            fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
        }
        for sc in &scenarios {
            let Ok(trace) = run_scenario_traced(sc, seed) else {
                continue;
            };
            if args.trace {
                eprintln!("== {} ({})", sc.name, trace.verdict);
                for s in &trace.steps {
                    eprintln!("{:>3} line {:<3} {}  -> {}", s.step, s.line, s.text, s.result);
                }
            }
            if let Some(dir) = &args.dump_state {
                let path = dir.join(format!("{}.json", sc.name));
                let json = trace.platform.machine.snapshot().to_json();
                fs::write(&path, json).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            }
        }
    }

    if let Some(r) = suite.results.iter().find(|r| r.observed.is_err()) {
        let Err(e) = &r.observed else { unreachable!() };
        return Err(Failure::usage(format!("{}: {e}", r.name)));
    }
    if !suite.all_passed() {
        return Err(Failure::mismatch(format!(
            "{} of {} scenarios did not match their expected verdict",
            suite.results.len() - suite.passed(),
            suite.results.len()
        )));
    }
    Ok(())
}

fn cmd_evictions(args: &EvictionArgs, seed: u64) -> Result<(), Failure> {
    if args.max_tweaks == 0 {
        return Err(Failure::usage("--max-tweaks must be at least 1"));
    }
    let rows = eviction_grid(&args.entries, &args.ways, 1..=args.max_tweaks, args.trials, seed)
        .map_err(|e| Failure::usage(e.to_string()))?;
    let mut csv = Vec::new();
    write_eviction_csv(&rows, &mut csv).map_err(|e| Failure::usage(e.to_string()))?;
    write_output(args.out.as_deref(), &csv)?;
    if let (Some(script), Some(out)) = (&args.gnuplot, &args.out) {
        let text = gnuplot_script(&out.display().to_string(), &args.entries, &args.ways, args.plot_mode);
        write_output(Some(script), text.as_bytes())?;
    }
    Ok(())
}

fn cmd_overhead(args: &OverheadArgs) -> Result<(), Failure> {
    let layout = TweakLayout::new(args.va_bits)
        .ok_or_else(|| Failure::usage(format!("unsupported virtual address width {}", args.va_bits)))?;
    if args.min_exp > args.max_exp || args.max_exp > 40 {
        return Err(Failure::usage("cache size exponents must satisfy min <= max <= 40"));
    }
    let rows = overhead_sweep(layout, args.min_exp..=args.max_exp, &default_tc_configs(layout))
        .map_err(|e| Failure::usage(e.to_string()))?;
    let mut csv = Vec::new();
    write_overhead_csv(&rows, &mut csv).map_err(|e| Failure::usage(e.to_string()))?;
    write_output(args.out.as_deref(), &csv)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Scenarios(a) => cmd_scenarios(a, cli.seed),
        Cmd::Evictions(a) => cmd_evictions(a, cli.seed),
        Cmd::Overhead(a) => cmd_overhead(a),
        Cmd::Image(c) => image::run(c, cli.seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("servas-sim: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
