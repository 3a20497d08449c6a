//! Batch front end: run simulations, population integrations, sweeps, and
//! condition checks; emit tables and plot-ready data.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric failure, 4 missing
//! inputs.

mod config;
mod presets;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};

use config::{load_config, sweep_config, trial_config, FileConfig, InitSection};
use stpca_core::analysis::{
    check_condition0_level1, check_condition1, check_condition2, ConditionParams,
};
use stpca_core::harness::{
    config_hash, csv_header, csv_row, estimate_flops, estimate_threshold, run_sweep,
    run_trial_full, trajectory_to_json, FLOP_GUARDRAIL,
};
use stpca_core::manifold::{sample_invariant, Scale};
use stpca_core::model::NoiseTensor;
use stpca_core::population::{eigen_track, integrate_corr, PopulationRun};
use stpca_core::rng::{derive_seed, stream_rng, SALT_INIT, SALT_MODEL, SALT_NOISE};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "stpca", version, about = "Spiked tensor PCA recovery simulations")]
struct Cli {
    /// Configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; defaults to the config's [output] dir, then "out".
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dotted-key override, KEY=VALUE; repeatable, last wins.
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,

    /// Serial execution with zeroed wall-clock columns (byte-stable output).
    #[arg(long, global = true)]
    deterministic: bool,

    /// Estimate cost and exit without running trials.
    #[arg(long, global = true)]
    dry_run: bool,

    /// Ignore the sweep cost guardrail / overwrite mismatched result files.
    #[arg(long, global = true)]
    force: bool,

    /// Suppress notices.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trial of the configured dynamics; write trajectory + summary.
    Simulate,
    /// Integrate the population correlation ODE; write a plot-ready CSV.
    Population {
        /// Built-in preset name instead of a config file.
        #[arg(long)]
        preset: Option<String>,
        /// List available presets and exit.
        #[arg(long)]
        list_presets: bool,
    },
    /// Run a (N, budget-exponent) sweep; write result CSV + threshold JSON.
    Sweep,
    /// Evaluate the initial-data conditions over invariant samples.
    Check,
    /// Summarize an existing result CSV as a markdown table (no recompute).
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            // numeric failures surface distinctly from config problems
            let numeric = err.chain().any(|cause| {
                matches!(
                    cause.downcast_ref::<stpca_core::Error>(),
                    Some(
                        stpca_core::Error::NonFinite(_)
                            | stpca_core::Error::BlowUp { .. }
                            | stpca_core::Error::SingularMatrix { .. }
                    )
                )
            });
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<ExitCode> {
    configure_workers(cli)?;
    match &cli.command {
        Command::Simulate => cmd_simulate(cli),
        Command::Population {
            preset,
            list_presets,
        } => cmd_population(cli, preset.as_deref(), *list_presets),
        Command::Sweep => cmd_sweep(cli),
        Command::Check => cmd_check(cli),
        Command::Report => cmd_report(cli),
    }
}

/// Worker-pool size: STPCA_WORKERS when set, one in deterministic mode,
/// otherwise the core count rayon detects.
fn configure_workers(cli: &Cli) -> anyhow::Result<()> {
    let threads = if cli.deterministic {
        Some(1)
    } else {
        match std::env::var("STPCA_WORKERS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .context("STPCA_WORKERS must be a positive integer")?,
            ),
            Err(_) => None,
        }
    };
    if let Some(threads) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .ok(); // a second invocation in-process keeps the first pool
    }
    Ok(())
}

fn read_config(cli: &Cli) -> anyhow::Result<FileConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("--config PATH is required"))?;
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    load_config(&text, &cli.overrides, cli.quiet)
}

fn out_dir(cli: &Cli, cfg: Option<&FileConfig>) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Some(dir) = cfg
        .and_then(|c| c.output.as_ref())
        .and_then(|o| o.dir.as_ref())
    {
        return PathBuf::from(dir);
    }
    PathBuf::from("out")
}

fn ensure_out_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn provenance_line(hash: &str) -> String {
    format!("# config={hash} version={VERSION}\n")
}

fn cmd_simulate(cli: &Cli) -> anyhow::Result<ExitCode> {
    let cfg = read_config(cli)?;
    let trial = trial_config(&cfg, cli.seed)?;
    let hash = config_hash(&trial);
    if cli.dry_run {
        println!("simulate: config {hash} valid; 1 trial");
        return Ok(ExitCode::SUCCESS);
    }
    let out = out_dir(cli, Some(&cfg));
    ensure_out_dir(&out)?;
    let (record, trajectory) = run_trial_full(&trial)?;

    let meta = BTreeMap::from([
        ("config".to_string(), hash.clone()),
        ("version".to_string(), VERSION.to_string()),
        ("dynamics".to_string(), record.dynamics.clone()),
        ("seed".to_string(), record.seed.to_string()),
    ]);
    std::fs::write(
        out.join("trajectory.json"),
        trajectory_to_json(&trajectory, &meta),
    )?;

    let mut summary = provenance_line(&hash);
    summary.push_str(&csv_header(record.r));
    summary.push('\n');
    summary.push_str(&csv_row(0, 0.0, &record, cli.deterministic));
    summary.push('\n');
    std::fs::write(out.join("summary.csv"), summary)?;

    println!("exact recovery: {}", record.exact);
    println!(
        "permutation: {}",
        record
            .permutation
            .as_ref()
            .map(|s| format!("{s:?}"))
            .unwrap_or_else(|| "none".to_string())
    );
    println!(
        "sequential elimination: {} (ordering {:?})",
        record.elimination.satisfied, record.elimination.ordering
    );
    println!("subspace error 2(r - Tr G): {:.6}", record.subspace_error_final);
    if record.neumann_violations > 0 {
        println!("neumann precondition violations: {}", record.neumann_violations);
    }
    Ok(ExitCode::SUCCESS)
}

fn population_init(r: usize, init: &InitSection) -> anyhow::Result<nalgebra::DMatrix<f64>> {
    use rand::Rng as _;
    if let Some(rows) = &init.m0 {
        if rows.len() != r || rows.iter().any(|row| row.len() != r) {
            bail!("init.m0 must be an {r} x {r} matrix");
        }
        return Ok(nalgebra::DMatrix::from_fn(r, r, |i, j| rows[i][j]));
    }
    let magnitude = init.magnitude.unwrap_or(1e-2);
    let mut rng = stream_rng(init.seed.unwrap_or(0));
    Ok(nalgebra::DMatrix::from_fn(r, r, |_, _| {
        magnitude * rng.gen_range(0.5..1.5)
    }))
}

fn cmd_population(cli: &Cli, preset: Option<&str>, list: bool) -> anyhow::Result<ExitCode> {
    if list {
        for name in presets::names() {
            println!("{name}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let cfg = match preset {
        Some(name) => {
            let text = presets::lookup(name).ok_or_else(|| {
                anyhow!(
                    "unknown preset `{name}`; available: {}",
                    presets::names().join(", ")
                )
            })?;
            load_config(text, &cli.overrides, cli.quiet)?
        }
        None => read_config(cli)?,
    };
    let section = cfg
        .population
        .clone()
        .ok_or_else(|| anyhow!("config needs a [population] section"))?;
    let hash = config_hash(&toml_hash_surrogate(&section));
    if cli.dry_run {
        println!(
            "population: config {hash} valid; {} RK4 steps",
            (section.horizon / section.dt).round() as usize
        );
        return Ok(ExitCode::SUCCESS);
    }
    let out = out_dir(cli, Some(&cfg));
    ensure_out_dir(&out)?;
    let m0 = population_init(section.r, &section.init)?;
    let run: PopulationRun = integrate_corr(
        &m0,
        &section.lambdas,
        section.p,
        section.horizon,
        section.dt,
        section.rhs.into(),
        section.record_every,
    )?;

    // CSV: t, all r^2 correlations row-major, then the Gram eigenvalues
    let r = section.r;
    let mut csv = provenance_line(&hash);
    csv.push('t');
    for i in 1..=r {
        for j in 1..=r {
            let _ = write!(csv, ",m_{i}{j}");
        }
    }
    for k in 1..=r {
        let _ = write!(csv, ",theta_{k}");
    }
    csv.push('\n');
    let grams: Vec<nalgebra::DMatrix<f64>> = run
        .trajectory
        .corr
        .iter()
        .map(|m| m.data().tr_mul(m.data()))
        .collect();
    let tracks = eigen_track(&grams);
    for (idx, (&t, m)) in run
        .trajectory
        .times
        .iter()
        .zip(run.trajectory.corr.iter())
        .enumerate()
    {
        let _ = write!(csv, "{t}");
        for i in 0..r {
            for j in 0..r {
                let _ = write!(csv, ",{}", m.entry(i, j));
            }
        }
        for track in &tracks {
            let _ = write!(csv, ",{}", track[idx]);
        }
        csv.push('\n');
    }
    std::fs::write(out.join("population.csv"), csv)?;
    std::fs::write(out.join("population.plot.py"), plot_script(r))?;

    // sidecar metadata, including the truncation note on blow-up
    let meta = serde_json::json!({
        "config": hash,
        "version": VERSION,
        "rows": run.trajectory.len(),
        "blowup": run.blowup.as_ref().map(|b| serde_json::json!({
            "t": b.t,
            "max_abs_entry": b.max_abs_entry,
            "note": "integration halted at blow-up; CSV truncated",
        })),
    });
    std::fs::write(
        out.join("population.meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    if let Some(b) = &run.blowup {
        println!("integration halted at t = {:.6} (blow-up); output truncated", b.t);
    }
    println!(
        "population: {} rows -> {}",
        run.trajectory.len(),
        out.join("population.csv").display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Companion plotting script; the CLI itself renders nothing.
fn plot_script(r: usize) -> String {
    format!(
        r##"#!/usr/bin/env python3
"""Plot correlations and Gram eigenvalues from population.csv."""
import csv
import sys

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "population.csv"
with open(path) as fh:
    rows = [row for row in csv.reader(r_ for r_ in fh if not r_.startswith("#"))]
header, data = rows[0], [[float(v) for v in row] for row in rows[1:]]
t = [row[0] for row in data]
fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4))
for k in range(1, {m_end}):
    left.plot(t, [row[k] for row in data], label=header[k])
for k in range({m_end}, {theta_end}):
    right.plot(t, [row[k] for row in data], label=header[k])
left.set(xlabel="t", title="correlations")
right.set(xlabel="t", title="Gram eigenvalues")
left.legend()
right.legend()
fig.tight_layout()
fig.savefig(path.replace(".csv", ".png"), dpi=150)
"##,
        m_end = 1 + r * r,
        theta_end = 1 + r * r + r,
    )
}

// PopulationSection does not implement Serialize (it is input-only); hash a
// stable textual form instead.
fn toml_hash_surrogate(section: &config::PopulationSection) -> String {
    format!("{section:?}")
}

fn cmd_sweep(cli: &Cli) -> anyhow::Result<ExitCode> {
    let file_cfg = read_config(cli)?;
    let cfg = sweep_config(&file_cfg, cli.seed, cli.deterministic)?;
    let flops = estimate_flops(&cfg);
    if cli.dry_run {
        println!(
            "sweep: {} cells x {} trials, estimated {flops:.3e} FLOPs (guardrail {FLOP_GUARDRAIL:.0e})",
            cfg.n_values.len() * cfg.alphas.len(),
            cfg.trials_per_cell
        );
        return Ok(ExitCode::SUCCESS);
    }
    if flops > FLOP_GUARDRAIL && !cli.force {
        bail!(
            "sweep estimates {flops:.3e} FLOPs, above the {FLOP_GUARDRAIL:.0e} guardrail; rerun with --force to proceed"
        );
    }
    let out = out_dir(cli, Some(&file_cfg));
    ensure_out_dir(&out)?;
    let csv_path = out.join("sweep.csv");
    // refuse to resume a file written by a different configuration
    if csv_path.exists() && !cli.force {
        let head = std::fs::read_to_string(&csv_path)?;
        let expected = format!("# config={}", config_hash(&cfg));
        if let Some(first) = head.lines().next() {
            if !first.starts_with(&expected) {
                bail!(
                    "{} belongs to a different config ({first}); rerun with --force to overwrite",
                    csv_path.display()
                );
            }
        }
    }
    let summary = run_sweep(&cfg, Some(&csv_path))?;
    let estimate = estimate_threshold(&summary)?;
    std::fs::write(
        out.join("threshold.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "config": summary.config_hash,
            "version": VERSION,
            "estimate": estimate,
        }))?,
    )?;

    println!("cell_id  N      alpha   steps   success  fraction  wilson95");
    for cell in &summary.cells {
        println!(
            "{:<8} {:<6} {:<7} {:<7} {:>3}/{:<4} {:<9.3} [{:.3}, {:.3}]",
            cell.cell_id,
            cell.n,
            cell.alpha,
            cell.steps,
            cell.successes,
            cell.trials,
            cell.fraction,
            cell.wilson_low,
            cell.wilson_high
        );
    }
    for crossing in &estimate.crossings {
        println!(
            "N = {:>5}: 50% crossing at alpha = {:.3} ({})",
            crossing.n, crossing.alpha_cross, crossing.flag
        );
    }
    if let Some(slope) = estimate.slope_vs_log_n {
        println!("crossing slope vs log N: {slope:.3}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(cli: &Cli) -> anyhow::Result<ExitCode> {
    let cfg = read_config(cli)?;
    let model_spec = cfg
        .model
        .clone()
        .ok_or_else(|| anyhow!("config needs a [model] section"))?;
    let section = cfg.check.clone().unwrap_or(config::CheckSection {
        samples: 100,
        m_samples: 1.0,
    });
    let conditions = cfg.conditions.unwrap_or_default();
    let master = cli.seed.or(cfg.seed).unwrap_or(0);
    if cli.dry_run {
        println!("check: {} invariant samples", section.samples);
        return Ok(ExitCode::SUCCESS);
    }
    let out = out_dir(cli, Some(&cfg));
    ensure_out_dir(&out)?;

    let model = model_spec.build(derive_seed(master, SALT_MODEL))?;
    let (mut c1, mut c1_abs, mut c2, mut c0) = (0usize, 0usize, 0usize, 0usize);
    let mut c2_applicable = false;
    for k in 0..section.samples {
        let seed = derive_seed(master, 100_000 + k as u64);
        let mut rng = stream_rng(derive_seed(seed, SALT_INIT));
        let x = sample_invariant(model.n(), model.r(), Scale::SqrtN, &mut rng)?;
        let v = model.v_sqrtn();
        let rep1 = check_condition1(&x, &v, &conditions)?;
        c1 += usize::from(rep1.pass);
        c1_abs += usize::from(rep1.pass_abs);
        if model.p() >= 3 {
            c2_applicable = true;
            let rep2 = check_condition2(&x, &v, model.lambdas(), model.p(), &conditions)?;
            c2 += usize::from(rep2.pass);
        }
        let w = NoiseTensor::sample(
            model.n(),
            model.p(),
            &model_spec.noise,
            derive_seed(seed, SALT_NOISE),
        )?;
        let rep0 = check_condition0_level1(
            &x,
            Some(&w),
            &model,
            section.m_samples,
            conditions.gamma0,
            conditions.n_level,
        )?;
        c0 += usize::from(rep0.pass);
    }
    let total = section.samples;
    let table = render_check_table(&conditions, total, c1, c1_abs, c2_applicable, c2, c0);
    print!("{table}");
    let out_path = out;
    let mut report_text = provenance_line(&config_hash(&serde_json::json!({
        "model": &model_spec, "conditions": &conditions, "samples": total, "seed": master,
    })));
    report_text.push_str(&table);
    std::fs::write(out_path.join("check.md"), report_text)?;
    Ok(ExitCode::SUCCESS)
}

fn render_check_table(
    conditions: &ConditionParams,
    total: usize,
    c1: usize,
    c1_abs: usize,
    c2_applicable: bool,
    c2: usize,
    c0: usize,
) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "| condition | pass rate |");
    let _ = writeln!(t, "|---|---|");
    let _ = writeln!(
        t,
        "| scale band (signed), gamma1={}, gamma2={} | {}/{} |",
        conditions.gamma1, conditions.gamma2, c1, total
    );
    let _ = writeln!(t, "| scale band on magnitudes | {}/{} |", c1_abs, total);
    if c2_applicable {
        let _ = writeln!(
            t,
            "| separation, gamma={} | {}/{} |",
            conditions.gamma, c2, total
        );
    }
    let _ = writeln!(
        t,
        "| noise generator level 1, gamma0={} | {}/{} |",
        conditions.gamma0, c0, total
    );
    t
}

fn cmd_report(cli: &Cli) -> anyhow::Result<ExitCode> {
    let cfg = read_config(cli)?;
    let section = cfg
        .report
        .clone()
        .ok_or_else(|| anyhow!("config needs a [report] section"))?;
    let path = Path::new(&section.results);
    if !path.exists() {
        eprintln!("error: results file {} does not exist", path.display());
        return Ok(ExitCode::from(4));
    }
    let text = std::fs::read_to_string(path)?;
    let mut rows = 0usize;
    // cell_id -> (N, alpha, exact successes, permutation successes, trials)
    let mut cells: BTreeMap<usize, (String, String, usize, usize, usize)> = BTreeMap::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("cell_id") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 13 {
            continue;
        }
        rows += 1;
        let cell: usize = fields[0].parse().unwrap_or(usize::MAX);
        let entry = cells
            .entry(cell)
            .or_insert((fields[1].to_string(), fields[6].to_string(), 0, 0, 0));
        entry.4 += 1;
        if fields[10] == "true" {
            entry.2 += 1;
        }
        if fields[11] != "-" {
            entry.3 += 1;
        }
    }
    if rows == 0 {
        eprintln!("error: {} holds no result rows", path.display());
        return Ok(ExitCode::from(4));
    }
    println!("| cell | N | alpha | exact | permutation | trials |");
    println!("|---|---|---|---|---|---|");
    for (cell, (n, alpha, exact, perm, trials)) in &cells {
        println!("| {cell} | {n} | {alpha} | {exact} | {perm} | {trials} |");
    }
    Ok(ExitCode::SUCCESS)
}
