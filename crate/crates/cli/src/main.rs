//! Batch command-line front end: configure, run, check, and report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pgs_core::diagnostics;
use pgs_core::harness::{self, Protocol, SweepAxis};
use pgs_core::report::{self, fnv1a_hash, RunReport};
use pgs_core::types::ModelFamily;

/// Weakly supervised learning by bilevel label-quality optimization.
#[derive(Parser)]
#[command(name = "pgs", version, about)]
struct Cli {
    /// Worker threads for parallel runs (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the experiment described by a config file.
    Run {
        /// JSON config with a top-level "protocol" object.
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path overrides, e.g. --set protocol.pgs.upper_iters=10
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        /// Replace the protocol seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default "runs", or config.output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit 0 even when runs are flagged unsafe.
        #[arg(long)]
        no_fail_unsafe: bool,
    },
    /// Run the sweep axis in the config across its grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Three-way hypergradient agreement suite on built-in fixtures.
    Gradcheck {
        /// all | linear | softmax | mlp
        #[arg(long, default_value = "all")]
        family: String,
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        /// Instances per family.
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate run reports from a directory into tables.
    Report {
        dir: PathBuf,
        /// Also write the aggregate table to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare the feasible-region projections against reference oracles.
    ProjectCheck {
        #[arg(long, default_value_t = 500)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Top-level config file: the protocol plus optional sweep axis and output
/// settings.
#[derive(serde::Deserialize)]
struct AppConfig {
    protocol: Protocol,
    #[serde(default)]
    sweep: Option<SweepAxis>,
    #[serde(default)]
    output_dir: Option<String>,
    #[serde(default = "default_fail_on_unsafe")]
    fail_on_unsafe: bool,
}

fn default_fail_on_unsafe() -> bool {
    true
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli
        .threads
        .or_else(|| std::env::var("PGS_THREADS").ok().and_then(|v| v.parse().ok()))
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: failed to set thread pool size: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            config,
            overrides,
            seed,
            out,
            no_fail_unsafe,
        } => cmd_run(&config, &overrides, seed, out, no_fail_unsafe),
        Command::Sweep {
            config,
            overrides,
            out,
        } => cmd_sweep(&config, &overrides, out),
        Command::Gradcheck {
            family,
            threshold,
            instances,
            seed,
        } => cmd_gradcheck(&family, threshold, instances, seed),
        Command::Report { dir, csv } => cmd_report(&dir, csv),
        Command::ProjectCheck { cases, seed } => cmd_project_check(cases, seed),
    }
}

/// Parse `path.to.field=value` and apply it to a JSON tree. Values parse as
/// JSON when possible, falling back to a plain string.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override '{spec}' is not PATH=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("override path '{path}': '{seg}' is not an object"))?;
        if i + 1 == segments.len() {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

fn load_config(
    path: &Path,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<(AppConfig, serde_json::Value)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("{} is not valid JSON", path.display()))?;
    // env overrides first, then command-line ones win
    if let Ok(env_sets) = std::env::var("PGS_SET") {
        for spec in env_sets.split(';').filter(|s| !s.trim().is_empty()) {
            apply_override(&mut value, spec.trim())?;
        }
    }
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    if let Some(s) = seed {
        apply_override(&mut value, &format!("protocol.seeds=[{s}]"))?;
    }
    let config: AppConfig = serde_json::from_value(value.clone())
        .with_context(|| format!("{} does not match the config schema", path.display()))?;
    config
        .protocol
        .pgs
        .validate()
        .context("invalid optimizer settings")?;
    Ok((config, value))
}

fn output_dir(config: &AppConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var("PGS_OUT_DIR").ok().map(PathBuf::from))
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_reports(
    dir: &Path,
    effective_config: &serde_json::Value,
    reports: &[RunReport],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(effective_config)?,
    )?;
    let config_bytes = serde_json::to_vec(effective_config)?;
    for r in reports {
        let mut key = config_bytes.clone();
        key.extend(r.method.as_bytes());
        key.extend(r.seed.to_le_bytes());
        let run_dir = dir.join(format!("run-{:016x}", fnv1a_hash(&key)));
        fs::create_dir_all(&run_dir)?;
        fs::write(run_dir.join("report.json"), r.to_json()?)?;
    }
    let rows = report::aggregate(reports);
    fs::write(dir.join("summary.csv"), report::aggregate_to_csv(&rows))?;
    Ok(())
}

fn cmd_run(
    config_path: &Path,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<PathBuf>,
    no_fail_unsafe: bool,
) -> Result<ExitCode> {
    let (config, effective) = load_config(config_path, overrides, seed)?;
    let reports = harness::run_experiment(&config.protocol)?;
    let dir = output_dir(&config, out);
    write_reports(&dir, &effective, &reports)?;

    println!(
        "{} runs of '{}' written to {}",
        reports.len(),
        config.protocol.name,
        dir.display()
    );
    for r in &reports {
        let flag = if r.unsafe_run { "  [UNSAFE]" } else { "" };
        let metrics: Vec<String> = r
            .test_metrics
            .iter()
            .map(|(k, v)| format!("{k}={v:.4}"))
            .collect();
        println!(
            "  seed {:>3}  {:<14} {}{}",
            r.seed,
            r.method,
            metrics.join(" "),
            flag
        );
    }
    let rows = report::aggregate(&reports);
    if !rows.is_empty() {
        println!("\n{}", report::aggregate_to_table(&rows));
    }

    let any_unsafe = reports.iter().any(|r| r.unsafe_run);
    if any_unsafe && config.fail_on_unsafe && !no_fail_unsafe {
        eprintln!("one or more runs flagged unsafe");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(config_path: &Path, overrides: &[String], out: Option<PathBuf>) -> Result<ExitCode> {
    let (config, effective) = load_config(config_path, overrides, None)?;
    let axis = config
        .sweep
        .as_ref()
        .context("config has no 'sweep' section")?;
    let table = harness::sweep(axis, &config.protocol)?;
    let dir = output_dir(&config, out);
    fs::create_dir_all(&dir)?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&effective)?,
    )?;
    fs::write(dir.join("sweep.csv"), table.to_csv())?;
    println!(
        "sweep of '{}' written to {}",
        config.protocol.name,
        dir.display()
    );
    for cell in &table.cells {
        println!("\n[{}]", cell.label);
        print!("{}", report::aggregate_to_table(&cell.rows));
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_families(name: &str) -> Result<Vec<ModelFamily>> {
    match name {
        "all" => Ok(vec![
            ModelFamily::LinearRegression,
            ModelFamily::SoftmaxRegression,
            ModelFamily::TwoLayerMlp { hidden: 4 },
        ]),
        "linear" => Ok(vec![ModelFamily::LinearRegression]),
        "softmax" => Ok(vec![ModelFamily::SoftmaxRegression]),
        "mlp" => Ok(vec![ModelFamily::TwoLayerMlp { hidden: 4 }]),
        other => bail!("unknown family '{other}' (expected all|linear|softmax|mlp)"),
    }
}

fn cmd_gradcheck(family: &str, threshold: f64, instances: usize, seed: u64) -> Result<ExitCode> {
    let families = gradcheck_families(family)?;
    let mut worst = 0.0f64;
    println!(
        "{:<26} {:>4} {:>4} {:>3}  {:>13} {:>13} {:>13}",
        "family", "n", "d", "k", "impl-vs-rev", "impl-vs-fd", "rev-vs-fd"
    );
    for &fam in &families {
        // the MLP differentiates a short unroll; convex families a long one
        let steps = if matches!(fam, ModelFamily::TwoLayerMlp { .. }) {
            80
        } else {
            800
        };
        let cases = diagnostics::agreement_sweep(&[fam], instances, steps, seed)?;
        for case in cases {
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{x:13.3e}"),
                None => format!("{:>13}", "-"),
            };
            println!(
                "{:<26} {:>4} {:>4} {:>3}  {} {} {:13.3e}",
                format!("{:?}", case.family),
                case.instances,
                case.dim,
                case.classes,
                fmt(case.implicit_vs_reverse),
                fmt(case.implicit_vs_fd),
                case.reverse_vs_fd
            );
            worst = worst.max(case.worst());
        }
    }
    println!("\nmax relative error {worst:.3e} (threshold {threshold:.1e})");
    if worst < threshold {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("hypergradient agreement above threshold");
        Ok(ExitCode::from(1))
    }
}

fn cmd_report(dir: &Path, csv: Option<PathBuf>) -> Result<ExitCode> {
    if !dir.exists() {
        bail!("{} does not exist", dir.display());
    }
    let mut reports = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = fs::read_dir(&d)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "json") {
                if let Ok(r) = RunReport::from_json(&fs::read_to_string(&path)?) {
                    reports.push(r);
                }
            }
        }
    }
    reports.sort_by(|a, b| (&a.method, a.seed).cmp(&(&b.method, b.seed)));
    let rows = report::aggregate(&reports);
    print!("{}", report::aggregate_to_table(&rows));
    if let Some(path) = csv {
        fs::write(&path, report::aggregate_to_csv(&rows))?;
        println!("written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_project_check(cases: usize, seed: u64) -> Result<ExitCode> {
    let summary = diagnostics::projection_check(cases, seed)?;
    println!(
        "projection check over {} cases per constraint set",
        summary.cases
    );
    println!(
        "  weight projection max distance gap       {:.3e}",
        summary.weight_max_gap
    );
    println!(
        "  ball projection max distance gap         {:.3e}",
        summary.ball_max_gap
    );
    println!(
        "  classification max constraint violation  {:.3e}",
        summary.classification_max_violation
    );
    println!(
        "  classification suboptimality mean/max    {:.4} / {:.4}",
        summary.classification_mean_subopt, summary.classification_max_subopt
    );
    println!(
        "  classification within 5% of oracle       {:.1}%",
        100.0 * summary.classification_within_5pct
    );
    let ok = summary.weight_max_gap < 1e-3
        && summary.ball_max_gap < 1e-3
        && summary.classification_max_violation < 1e-9
        && summary.classification_within_5pct >= 0.95;
    if ok {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("projection check failed");
        Ok(ExitCode::from(1))
    }
}
