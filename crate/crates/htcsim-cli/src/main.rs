//! `htcsim` command line: validate scenario files, run simulations, and
//! compare runs.
//!
//! Exit codes: 0 success, 1 IO error, 2 user/config error, 3 violated
//! internal invariant.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use htcsim_core::report::{compare, toml_diff_paths, CompareReport, RunSummary};
use htcsim_core::scenario::{preset, Scenario};
use htcsim_core::sim::{RunOutput, SimError, Simulation};

#[derive(Parser)]
#[command(name = "htcsim", version, about = "HTC-on-HPC integration simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Schema-check a scenario file and report every violation.
    Validate { path: PathBuf },
    /// Run a scenario (file or preset) and write its artifacts.
    Run {
        /// Scenario file; alternative to --preset.
        path: Option<PathBuf>,
        /// Named preset: ligo, atlas_bw or titan_backfill.
        #[arg(long)]
        preset: Option<String>,
        /// Scale factor applied to preset cluster and task counts.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Seed override; defaults to the scenario's seed (0 for presets).
        #[arg(long)]
        seed: Option<u64>,
        /// Run this many consecutive seeds and merge the summaries.
        #[arg(long, default_value_t = 1)]
        seeds: u32,
        /// Output directory for summary.json, metrics.csv and friends.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write the event trace as trace.log.
        #[arg(long)]
        trace: bool,
        /// Override any scenario key, e.g. --set overlay.target_pilots=0.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Compare the summaries of two run directories.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        /// Scenario key prefixes allowed to differ between the runs.
        #[arg(long = "allow")]
        allow: Vec<String>,
        /// Where to write the comparison report.
        #[arg(long, default_value = "compare.json")]
        out: PathBuf,
    },
}

enum CliError {
    Io(String),
    Config(String),
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Config(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Internal(m) => CliError::Internal(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { path } => cmd_validate(&path),
        Command::Run { path, preset, scale, seed, seeds, out, trace, set } => {
            cmd_run(path, preset, scale, seed, seeds, &out, trace, &set)
        }
        Command::Compare { run_a, run_b, allow, out } => cmd_compare(&run_a, &run_b, &allow, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn cmd_validate(path: &Path) -> Result<(), CliError> {
    let text = read_file(path)?;
    let scenario = Scenario::from_toml(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let diags = scenario.validate();
    if diags.is_empty() {
        println!("OK");
        Ok(())
    } else {
        for d in &diags {
            println!("{d}");
        }
        Err(CliError::Config(format!("{} violation(s)", diags.len())))
    }
}

fn load_scenario(
    path: Option<&Path>,
    preset_name: Option<&str>,
    scale: f64,
    overrides: &[String],
) -> Result<Scenario, CliError> {
    let mut scenario = match (path, preset_name) {
        (Some(p), None) => {
            let text = read_file(p)?;
            Scenario::from_toml(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        (None, Some(name)) => preset(name, scale).map_err(|e| CliError::Config(e.to_string()))?,
        (Some(_), Some(_)) => {
            return Err(CliError::Config("give either a scenario file or --preset, not both".into()))
        }
        (None, None) => {
            return Err(CliError::Config("a scenario file or --preset is required".into()))
        }
    };
    for kv in overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        scenario = scenario
            .with_override(key.trim(), value.trim())
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(scenario)
}

#[derive(Serialize)]
struct MergedSummary {
    base_seed: u64,
    seeds: u32,
    mean: BTreeMap<String, f64>,
    runs: Vec<RunSummary>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    path: Option<PathBuf>,
    preset_name: Option<String>,
    scale: f64,
    seed: Option<u64>,
    seeds: u32,
    out: &Path,
    trace: bool,
    overrides: &[String],
) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let mut scenario = load_scenario(path.as_deref(), preset_name.as_deref(), scale, overrides)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let diags = scenario.validate();
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("{d}");
        }
        return Err(CliError::Config(format!("{} violation(s)", diags.len())));
    }
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;

    if seeds == 1 {
        let output = Simulation::new(scenario.clone(), trace)?.run()?;
        write_run_artifacts(out, &scenario, &output)?;
        println!("{}", serde_json::to_string_pretty(&output.summary).expect("summary serializes"));
        return Ok(());
    }

    // Independent simulations per seed, merged in seed order.
    let base_seed = scenario.seed;
    let outputs: Vec<Result<(Scenario, RunOutput), SimError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..seeds)
            .map(|i| {
                let mut s = scenario.clone();
                s.seed = base_seed + u64::from(i);
                scope.spawn(move || {
                    let out = Simulation::new(s.clone(), trace)?.run()?;
                    Ok((s, out))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });
    let mut runs = Vec::new();
    for result in outputs {
        let (s, output) = result?;
        let dir = out.join(format!("seed-{}", s.seed));
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        write_run_artifacts(&dir, &s, &output)?;
        runs.push(output.summary);
    }
    let mut mean = BTreeMap::new();
    for summary in &runs {
        for (k, v) in summary.numeric_fields() {
            *mean.entry(k).or_insert(0.0) += v / f64::from(seeds);
        }
    }
    let merged = MergedSummary { base_seed, seeds, mean, runs };
    let text = serde_json::to_string_pretty(&merged).expect("merged serializes");
    write_file(&out.join("summary.json"), text.as_bytes())?;
    println!("{text}");
    Ok(())
}

fn write_run_artifacts(dir: &Path, scenario: &Scenario, output: &RunOutput) -> Result<(), CliError> {
    write_file(&dir.join("scenario.toml"), scenario.to_toml().as_bytes())?;
    let summary =
        serde_json::to_string_pretty(&output.summary).expect("summary serializes");
    write_file(&dir.join("summary.json"), summary.as_bytes())?;
    let mut csv = Vec::new();
    output.report.write_metrics_csv(&mut csv).expect("in-memory write");
    write_file(&dir.join("metrics.csv"), &csv)?;
    if let Some(trace) = &output.trace {
        write_file(&dir.join("trace.log"), trace.as_bytes())?;
    }
    Ok(())
}

fn cmd_compare(run_a: &Path, run_b: &Path, allow: &[String], out: &Path) -> Result<(), CliError> {
    let summary_a = read_summary(run_a)?;
    let summary_b = read_summary(run_b)?;
    let scenario_a: toml::Value = toml::from_str(&read_file(&run_a.join("scenario.toml"))?)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let scenario_b: toml::Value = toml::from_str(&read_file(&run_b.join("scenario.toml"))?)
        .map_err(|e| CliError::Config(e.to_string()))?;

    // Runs are comparable only when scenarios agree outside declared keys.
    let default_allow = ["overlay", "seed", "name"];
    let diffs = toml_diff_paths(&scenario_a, &scenario_b);
    let undeclared: Vec<&String> = diffs
        .iter()
        .filter(|path| {
            !default_allow.iter().any(|a| path_matches(path, a))
                && !allow.iter().any(|a| path_matches(path, a))
        })
        .collect();
    if !undeclared.is_empty() {
        let list = undeclared.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        return Err(CliError::Config(format!("scenarios differ beyond declared keys: {list}")));
    }

    let report = compare(&summary_a, &summary_b);
    print_compare(&report);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(out, text.as_bytes())?;
    Ok(())
}

fn path_matches(path: &str, prefix: &str) -> bool {
    path == prefix || path.starts_with(&format!("{prefix}."))
}

fn read_summary(dir: &Path) -> Result<RunSummary, CliError> {
    let text = read_file(&dir.join("summary.json"))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.join("summary.json").display())))
}

fn print_compare(report: &CompareReport) {
    println!("{:<24} {:>14} {:>14} {:>14} {:>10}", "metric", "a", "b", "delta", "rel");
    for (name, d) in &report.metrics {
        let rel = d.rel.map_or_else(|| "-".to_string(), |r| format!("{:+.3}", r));
        println!("{:<24} {:>14.4} {:>14.4} {:>+14.4} {:>10}", name, d.a, d.b, d.abs, rel);
    }
}
