use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dfrelay::allocators::{
    allocate_scenario, pas1_problems, AllocOptions, Allocation, Scenario, Scheme,
};
use dfrelay::model::{stream_rng, NetworkConfig, SourceLayout};
use dfrelay::ops::NoCount;
use dfrelay::quartic::{Approximation, QuarticTrace};
use dfrelay::rates::{rate_report, FEASIBILITY_TOL};
use dfrelay::sim::{bench, run_sweep, BenchSpec, Preset, RunManifest, SweepSpec};
use dfrelay::specfun::{fit_coeffs, table_residual, RationalTable};

#[derive(Parser)]
#[command(
    name = "dfrelay",
    version,
    about = "Relay power allocation with statistical CSI"
)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for simulations (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Allocate relay power for one network and report the rates.
    Allocate(AllocateArgs),
    /// Run a sweep from a JSON spec or a named preset.
    Simulate(SimulateArgs),
    /// Refit the rational approximation table.
    FitTable(FitTableArgs),
    /// Time the allocators and count their operations.
    Bench(BenchArgs),
}

#[derive(Args)]
struct AllocateArgs {
    /// Network description (JSON).
    #[arg(long, conflicts_with = "users")]
    config: Option<PathBuf>,
    /// Draw a random network with this many users instead of reading a config.
    #[arg(long)]
    users: Option<usize>,
    /// Source power for `--users` (default 5).
    #[arg(long, requires = "users")]
    ps: Option<f64>,
    /// Relay budget for `--users` (default 4 per user).
    #[arg(long, requires = "users")]
    pr: Option<f64>,
    #[arg(long, default_value = "pas1")]
    scheme: Scheme,
    /// Rational form used by PAS-1: `anchored` or `table`.
    #[arg(long, default_value = "anchored")]
    approximation: Approximation,
    /// Coefficient table CSV for `--approximation table` (default: refitted rows).
    #[arg(long)]
    table: Option<PathBuf>,
    /// Also write the quartic intermediates of every user.
    #[arg(long)]
    dump_quartic: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    /// One of fig-m5, fig-m25, fig-rvsps, fig-scaling, fig-rvspr, fig-bench.
    #[arg(long)]
    preset: Option<Preset>,
    /// Trials per sweep point, or repetitions for fig-bench.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    realizations: Option<usize>,
    /// Fill the wall_clock_ms column (output is then no longer reproducible).
    #[arg(long)]
    timing: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct FitTableArgs {
    /// Samples per range.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated user counts.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 25, 50, 100])]
    m: Vec<usize>,
    #[arg(long, default_value_t = 15)]
    reps: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Allocate(a) => cmd_allocate(a, cli.seed),
        Command::Simulate(a) => cmd_simulate(a, cli.seed, cli.workers),
        Command::FitTable(a) => cmd_fit_table(a, cli.seed),
        Command::Bench(a) => cmd_bench(a, cli.seed),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], manifest: &mut RunManifest) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
    manifest.outputs.push(name.to_string());
    Ok(())
}

/// Reads every CSV output back and checks it has a header plus `rows` data lines.
fn check_csv(dir: &Path, name: &str, rows: usize) -> Result<()> {
    let path = dir.join(name);
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(&path)
        .with_context(|| format!("cannot reopen {}", path.display()))?;
    let n = rdr
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("{} is not valid CSV", path.display()))?
        .len();
    ensure!(
        n == rows,
        "{} has {n} data rows, expected {rows}",
        path.display()
    );
    Ok(())
}

fn finish_manifest(dir: &Path, mut manifest: RunManifest) -> Result<()> {
    manifest.outputs.push("manifest.json".into());
    let json = manifest.to_json_pretty()?;
    fs::write(dir.join("manifest.json"), &json).context("cannot write manifest.json")?;
    let back: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    for out in &back.outputs {
        ensure!(dir.join(out).is_file(), "declared output {out} is missing");
    }
    Ok(())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> dfrelay::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

#[derive(Serialize)]
struct UserTrace {
    user: usize,
    tau: f64,
    #[serde(flatten)]
    trace: QuarticTrace,
}

fn cmd_allocate(a: AllocateArgs, seed: u64) -> Result<()> {
    let cfg = match (&a.config, a.users) {
        (Some(path), _) => NetworkConfig::load(path)
            .with_context(|| format!("invalid config {}", path.display()))?,
        (None, Some(m)) => {
            let layout = SourceLayout::sample(&mut stream_rng(seed, 0), m);
            NetworkConfig::normalized(
                a.ps.unwrap_or(5.0),
                a.pr.unwrap_or(4.0 * m as f64),
                layout.geometry(0.5, 1.0),
            )?
        }
        (None, None) => bail!("either --config or --users is required"),
    };
    let mut opts = AllocOptions {
        approximation: a.approximation,
        ..AllocOptions::default()
    };
    if let Some(t) = &a.table {
        opts.table =
            RationalTable::load(t).with_context(|| format!("invalid table {}", t.display()))?;
    }

    let sc = Scenario::new(&cfg)?;
    let alloc: Allocation = allocate_scenario(&sc, a.scheme, &opts, &mut NoCount)?;
    let report = rate_report(
        &cfg.all_path_coeffs(),
        cfg.ps,
        &alloc.powers,
        cfg.bandwidth_hz,
    )?;

    ensure!(
        alloc.powers.iter().all(|p| p.is_finite() && *p >= 0.0),
        "allocation has negative or non-finite powers"
    );
    ensure!(
        alloc.residual <= 1e-6 * cfg.pr || alloc.unspent > 0.0,
        "allocation misses the budget by {}",
        alloc.residual
    );
    if a.scheme.is_capped() && !report.violations.is_empty() {
        bail!(
            "users {:?} exceed their source-relay rate by more than {FEASIBILITY_TOL}",
            report.violations
        );
    }

    prepare_out(&a.out)?;
    let config = serde_json::to_value(&cfg)?;
    let mut manifest = RunManifest::new("allocate", config, seed);
    write_file(
        &a.out,
        "allocation.csv",
        &csv_bytes(|b| alloc.write_csv(b))?,
        &mut manifest,
    )?;
    write_file(
        &a.out,
        "rates.csv",
        &csv_bytes(|b| report.write_csv(b))?,
        &mut manifest,
    )?;
    if a.dump_quartic {
        let problems = pas1_problems(&sc, &opts, &mut NoCount)?;
        let tau = match alloc.multiplier {
            Some(t) => t,
            None => allocate_scenario(&sc, Scheme::Pas1, &opts, &mut NoCount)?
                .multiplier
                .unwrap_or(f64::NAN),
        };
        let traces = problems
            .iter()
            .enumerate()
            .map(|(user, p)| {
                Ok(UserTrace {
                    user,
                    tau,
                    trace: p.trace(tau)?,
                })
            })
            .collect::<dfrelay::Result<Vec<_>>>()?;
        write_file(
            &a.out,
            "quartic_trace.json",
            serde_json::to_string_pretty(&traces)?.as_bytes(),
            &mut manifest,
        )?;
    }
    check_csv(&a.out, "allocation.csv", cfg.m)?;
    check_csv(&a.out, "rates.csv", cfg.m + 1)?;
    finish_manifest(&a.out, manifest)?;

    println!(
        "{}: K = {}, system rate {:.6} Mbit/s, {} capped",
        alloc.scheme,
        alloc.iterations,
        report.system_rate_mbps(),
        alloc.capped_users.len()
    );
    Ok(())
}

fn cmd_simulate(a: SimulateArgs, seed: u64, workers: Option<usize>) -> Result<()> {
    if a.preset == Some(Preset::FigBench) {
        return cmd_bench(
            BenchArgs {
                m: BenchSpec::default().m_values,
                reps: a.trials.unwrap_or(BenchSpec::default().repetitions),
                out: a.out,
            },
            seed,
        );
    }
    let mut specs: Vec<SweepSpec> = match (&a.spec, a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))?;
            let spec: SweepSpec = serde_json::from_str(&text)
                .with_context(|| format!("invalid spec {}", path.display()))?;
            vec![spec]
        }
        (None, Some(p)) => p.sweeps(),
        (None, None) => bail!("either --spec or --preset is required"),
    };
    for s in &mut specs {
        s.seed = seed;
        if let Some(t) = a.trials {
            s.trials = t;
        }
        if let Some(r) = a.realizations {
            s.realizations = r;
        }
        s.timing |= a.timing;
        if s.name.is_empty() {
            s.name = "sweep".into();
        }
        s.validate()?;
    }

    prepare_out(&a.out)?;
    let mut manifest = RunManifest::new("simulate", serde_json::to_value(&specs)?, seed);
    let mut failed = None;
    for s in &specs {
        let res = run_sweep(s, workers)?;
        let name = format!("{}.csv", s.name);
        write_file(
            &a.out,
            &name,
            &csv_bytes(|b| res.write_csv(b))?,
            &mut manifest,
        )?;
        check_csv(&a.out, &name, s.values.len() * s.schemes.len())?;
        manifest.failures.extend(res.failures());
        if let Err(e) = res.check_failures() {
            failed.get_or_insert(e);
        }
        println!(
            "{}: {} rows -> {}",
            s.name,
            res.rows.len(),
            a.out.join(&name).display()
        );
    }
    finish_manifest(&a.out, manifest)?;
    if let Some(e) = failed {
        return Err(e.into());
    }
    Ok(())
}

fn cmd_fit_table(a: FitTableArgs, seed: u64) -> Result<()> {
    ensure!(a.samples >= 10, "--samples must be at least 10");
    let reference = RationalTable::published();
    let mut refit_rows = Vec::new();
    let mut report = csv::Writer::from_writer(Vec::new());
    report.write_record([
        "source",
        "range_lo_db",
        "range_hi_db",
        "a",
        "b",
        "c",
        "residual",
        "rmse",
        "rmse_squared_form",
        "iterations",
        "converged",
        "best_reference_residual",
    ])?;
    for row in reference.rows() {
        let (lo, hi) = (row.range_lo_db, row.range_hi_db);
        let fit = fit_coeffs(lo, hi, a.samples)?;
        let best_ref = reference
            .rows()
            .iter()
            .map(|r| table_residual(r, lo, hi, a.samples))
            .fold(f64::INFINITY, f64::min);
        let n = a.samples as f64;
        report.write_record([
            "refit".to_string(),
            lo.to_string(),
            hi.to_string(),
            fit.coeffs.a.to_string(),
            fit.coeffs.b.to_string(),
            fit.coeffs.c.to_string(),
            fit.residual.to_string(),
            fit.rmse.to_string(),
            fit.rmse_squared_form.to_string(),
            fit.iterations.to_string(),
            fit.converged.to_string(),
            best_ref.to_string(),
        ])?;
        let ref_res = table_residual(row, lo, hi, a.samples);
        report.write_record([
            "reference".to_string(),
            lo.to_string(),
            hi.to_string(),
            row.a.to_string(),
            row.b.to_string(),
            row.c.to_string(),
            ref_res.to_string(),
            (ref_res / n).sqrt().to_string(),
            (ref_res / n.sqrt()).to_string(),
            String::new(),
            String::new(),
            best_ref.to_string(),
        ])?;
        if !fit.converged {
            eprintln!("warning: fit over [{lo}, {hi}] dB stopped before converging");
        }
        println!(
            "[{lo:>5}, {hi:>4}] dB  refit S = {:.6e}  reference S = {:.6e}",
            fit.residual, ref_res
        );
        refit_rows.push(fit.coeffs);
    }
    let table = RationalTable::new(refit_rows)?;

    prepare_out(&a.out)?;
    let config = serde_json::json!({ "samples": a.samples });
    let mut manifest = RunManifest::new("fit-table", config, seed);
    write_file(
        &a.out,
        "fit_table.csv",
        &report.into_inner()?,
        &mut manifest,
    )?;
    write_file(
        &a.out,
        "coeffs.csv",
        &csv_bytes(|b| table.write_csv(b))?,
        &mut manifest,
    )?;
    check_csv(&a.out, "fit_table.csv", 6)?;
    RationalTable::load(a.out.join("coeffs.csv")).context("coeffs.csv does not load back")?;
    finish_manifest(&a.out, manifest)
}

fn cmd_bench(a: BenchArgs, seed: u64) -> Result<()> {
    let spec = BenchSpec {
        m_values: a.m,
        repetitions: a.reps,
        seed,
        ..BenchSpec::default()
    };
    let res = bench(&spec)?;
    prepare_out(&a.out)?;
    let mut manifest = RunManifest::new("bench", serde_json::to_value(&spec)?, seed);
    write_file(
        &a.out,
        "bench.csv",
        &csv_bytes(|b| res.write_csv(b))?,
        &mut manifest,
    )?;
    check_csv(
        &a.out,
        "bench.csv",
        spec.m_values.len() * spec.schemes.len(),
    )?;
    finish_manifest(&a.out, manifest)?;

    for &scheme in &spec.schemes {
        println!("{scheme:>6}: growth exponent {:.2}", res.exponent(scheme));
    }
    let last = *spec.m_values.last().expect("validated non-empty");
    for den in [Scheme::Pas1, Scheme::Pas2] {
        if let Some(r) = res.ratio(last, Scheme::Pas0, den) {
            println!("pas0/{den} time ratio at M = {last}: {r:.1}");
        }
    }
    Ok(())
}
