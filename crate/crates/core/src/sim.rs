//! Experiment driver: analytic and Monte Carlo sweeps, figure presets and the
//! timing benchmark.
//!
//! Every trial draws its topology and fading from its own generator stream,
//! derived from `(seed, trial)`, and trial outcomes are reduced in index
//! order. Results are therefore identical for any worker count.
//!
//! Within a trial all schemes see the same topology and the same fading
//! draws, so differences between schemes are not blurred by sampling noise.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocators::{allocate_scenario, AllocOptions, Scenario, Scheme};
use crate::error::{Error, Result};
use crate::model::{stream_rng, FadingDraw, PathCoeffs, SourceLayout};
use crate::ops::{NoCount, OpTally};
use crate::quartic::Approximation;
use crate::rates::{instantaneous_terms, LOG2_E};

const STREAM_TOPOLOGY: u64 = 0;
const STREAM_FADING: u64 = 1;
const STREAM_BENCH: u64 = 2;

/// Largest tolerated share of failed trials per sweep point.
pub const MAX_FAILURE_RATE: f64 = 0.01;

fn stream(trial: u64, purpose: u64) -> u64 {
    (trial << 2) | purpose
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepVariable {
    #[serde(rename = "relay_position")]
    RelayPosition,
    M,
    Ps,
    Pr,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::RelayPosition => "relay_position",
            SweepVariable::M => "M",
            SweepVariable::Ps => "Ps",
            SweepVariable::Pr => "Pr",
        }
    }
}

fn default_trials() -> usize {
    200
}
fn default_realizations() -> usize {
    500
}
fn default_schemes() -> Vec<Scheme> {
    vec![
        Scheme::Pas0,
        Scheme::Pas1,
        Scheme::Pas2,
        Scheme::Cwf,
        Scheme::Subop,
    ]
}
fn default_relay() -> f64 {
    0.5
}
fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn default_bandwidth() -> f64 {
    1e6
}

/// One experiment: a swept parameter plus the fixed base scenario.
///
/// Positions are on the axis through the centre of the source disc (the
/// origin) and the destination at `dest_position`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub name: String,
    pub sweep_variable: SweepVariable,
    pub values: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "Ps")]
    pub ps: f64,
    #[serde(rename = "Pr", default)]
    pub pr: f64,
    /// When set, `P_r = pr_per_user · M` and `Pr` is ignored.
    #[serde(default)]
    pub pr_per_user: Option<f64>,
    #[serde(default = "default_relay")]
    pub relay_position: f64,
    #[serde(default = "one")]
    pub dest_position: f64,
    #[serde(default = "two")]
    pub alpha: f64,
    #[serde(rename = "Nr", default = "one")]
    pub nr: f64,
    #[serde(rename = "Nd", default = "one")]
    pub nd: f64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_hz: f64,
    #[serde(default)]
    pub approximation: Approximation,
    /// Record per-scheme wall-clock. Off by default so output stays reproducible.
    #[serde(default)]
    pub timing: bool,
}

/// Fully resolved parameters of one sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub m: usize,
    pub ps: f64,
    pub pr: f64,
    pub relay_position: f64,
}

fn spec_err(msg: impl Into<String>) -> Error {
    Error::Spec(msg.into())
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(spec_err("values must be non-empty"));
        }
        if self.trials < 1 || self.realizations < 1 {
            return Err(spec_err("trials and realizations must be >= 1"));
        }
        if self.schemes.is_empty() {
            return Err(spec_err("schemes must be non-empty"));
        }
        if self.trials as u64 >= 1 << 61 {
            return Err(spec_err("too many trials"));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("Nr", self.nr),
            ("Nd", self.nd),
            ("bandwidth_hz", self.bandwidth_hz),
            ("dest_position", self.dest_position),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(spec_err(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        for &v in &self.values {
            self.point(v)?;
        }
        Ok(())
    }

    /// Scenario parameters at sweep value `value`.
    pub fn point(&self, value: f64) -> Result<SweepPoint> {
        let mut p = SweepPoint {
            value,
            m: self.m,
            ps: self.ps,
            pr: self.pr,
            relay_position: self.relay_position,
        };
        match self.sweep_variable {
            SweepVariable::RelayPosition => p.relay_position = value,
            SweepVariable::M => {
                if !(value >= 1.0 && value.fract() == 0.0 && value <= 1e6) {
                    return Err(spec_err(format!(
                        "M values must be positive integers, got {value}"
                    )));
                }
                p.m = value as usize;
            }
            SweepVariable::Ps => p.ps = value,
            SweepVariable::Pr => p.pr = value,
        }
        if let (Some(k), false) = (self.pr_per_user, self.sweep_variable == SweepVariable::Pr) {
            p.pr = k * p.m as f64;
        }
        if p.m < 1 {
            return Err(spec_err("M must be >= 1"));
        }
        if !(p.ps.is_finite() && p.ps > 0.0) {
            return Err(spec_err(format!("Ps must be finite and > 0, got {}", p.ps)));
        }
        if !(p.pr.is_finite() && p.pr > 0.0) {
            return Err(spec_err(format!("Pr must be finite and > 0, got {}", p.pr)));
        }
        // The relay must not sit on the destination, where the path loss vanishes.
        if !(p.relay_position.is_finite() && (p.relay_position - self.dest_position).abs() > 1e-9) {
            return Err(spec_err(format!(
                "relay position {} must differ from the destination {}",
                p.relay_position, self.dest_position
            )));
        }
        Ok(p)
    }

    fn alloc_options(&self) -> AllocOptions {
        AllocOptions {
            approximation: self.approximation,
            ..AllocOptions::default()
        }
    }

    fn coeffs(&self, layout: &SourceLayout, relay: f64) -> Vec<PathCoeffs> {
        layout
            .geometry(relay, self.dest_position)
            .iter()
            .map(|u| PathCoeffs::from_geometry(u, self.alpha, self.nr, self.nd))
            .collect()
    }
}

/// One `(sweep value, scheme)` line of the result. Rates are in Mbit/s.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub sweep_value: f64,
    pub scheme: Scheme,
    /// Mean over trials of the analytic ergodic sum rate.
    pub mean_rate: f64,
    pub std_error: f64,
    pub mean_k: f64,
    pub wall_clock_ms: Option<f64>,
    /// Monte Carlo estimate of the same sum rate: per user, the sample mean
    /// of whichever instantaneous log term is binding in the analytic rate.
    pub mc_rate: f64,
    pub mc_std_error: f64,
    /// Standard error of the per-trial difference `mc − analytic`. Topology
    /// variation cancels in the difference, leaving only fading noise.
    pub gap_std_error: f64,
    /// Sample mean of the instantaneous rate `Σ min(R1, R2)`, a lower bound.
    pub mc_min_rate: f64,
    pub trials: usize,
    pub failed_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: [&str; 13] = [
    "sweep_value",
    "scheme",
    "mean_rate",
    "std_error",
    "mean_K",
    "wall_clock_ms",
    "mc_rate",
    "mc_std_error",
    "gap_std_error",
    "mc_min_rate",
    "trials",
    "failed_trials",
    "sweep_variable",
];

impl SweepResult {
    pub fn row(&self, value: f64, scheme: Scheme) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.sweep_value == value && r.scheme == scheme)
    }

    /// `(failed, total)` per sweep value.
    pub fn failures(&self) -> Vec<(f64, usize, usize)> {
        let mut out: Vec<(f64, usize, usize)> = Vec::new();
        for r in &self.rows {
            if out.last().is_none_or(|l| l.0 != r.sweep_value) {
                out.push((r.sweep_value, r.failed_trials, r.trials));
            }
        }
        out
    }

    /// Fails when any sweep point lost more than 1% of its trials.
    pub fn check_failures(&self) -> Result<()> {
        for (_, failed, total) in self.failures() {
            if failed as f64 > MAX_FAILURE_RATE * total as f64 {
                return Err(Error::TooManyFailures { failed, total });
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SWEEP_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.sweep_value.to_string(),
                r.scheme.to_string(),
                r.mean_rate.to_string(),
                r.std_error.to_string(),
                r.mean_k.to_string(),
                r.wall_clock_ms.map(|t| t.to_string()).unwrap_or_default(),
                r.mc_rate.to_string(),
                r.mc_std_error.to_string(),
                r.gap_std_error.to_string(),
                r.mc_min_rate.to_string(),
                r.trials.to_string(),
                r.failed_trials.to_string(),
                self.spec.sweep_variable.name().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SchemeOutcome {
    analytic: f64,
    mc_binding: f64,
    mc_min: f64,
    iterations: usize,
    elapsed_ms: f64,
}

/// Runs one trial at one sweep point; `None` if any scheme failed.
fn run_trial(
    spec: &SweepSpec,
    pt: &SweepPoint,
    trial: u64,
    opts: &AllocOptions,
) -> Option<Vec<SchemeOutcome>> {
    let layout = SourceLayout::sample(
        &mut stream_rng(spec.seed, stream(trial, STREAM_TOPOLOGY)),
        pt.m,
    );
    let coeffs = spec.coeffs(&layout, pt.relay_position);
    let sc = Scenario::from_coeffs(&coeffs, pt.ps, pt.pr, &mut NoCount);

    let mut outcomes = Vec::with_capacity(spec.schemes.len());
    let mut powers = Vec::with_capacity(spec.schemes.len());
    // Per scheme and user: is the source-relay term the binding one?
    let mut relay_binds = Vec::with_capacity(spec.schemes.len());
    for &scheme in &spec.schemes {
        let start = spec.timing.then(Instant::now);
        let alloc = allocate_scenario(&sc, scheme, opts, &mut NoCount).ok()?;
        let elapsed_ms = start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3);
        if !alloc.converged || alloc.powers.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return None;
        }
        let mut analytic = 0.0;
        let mut binds = Vec::with_capacity(pt.m);
        for (u, &p) in sc.users.iter().zip(&alloc.powers) {
            let (rate, r2) = u.rate(pt.ps, p, &mut NoCount);
            analytic += rate;
            binds.push(LOG2_E * u.psi < r2);
        }
        outcomes.push(SchemeOutcome {
            analytic,
            iterations: alloc.iterations,
            elapsed_ms,
            ..SchemeOutcome::default()
        });
        powers.push(alloc.powers);
        relay_binds.push(binds);
    }

    let mut rng = stream_rng(spec.seed, stream(trial, STREAM_FADING));
    let mut draw = FadingDraw::zeros(pt.m);
    let mut relay_terms = vec![0.0; pt.m];
    for _ in 0..spec.realizations {
        draw.resample(&mut rng);
        for (i, k) in coeffs.iter().enumerate() {
            relay_terms[i] = (pt.ps * draw.h_sr[i].norm_sqr() / k.k_sr).ln_1p() * LOG2_E;
        }
        for (s, out) in outcomes.iter_mut().enumerate() {
            let (mut binding, mut min) = (0.0, 0.0);
            for (i, k) in coeffs.iter().enumerate() {
                let (_, dest) = instantaneous_terms(
                    0.0,
                    draw.h_sd[i].norm_sqr(),
                    draw.h_rd[i].norm_sqr(),
                    k,
                    pt.ps,
                    powers[s][i],
                );
                let relay = relay_terms[i];
                binding += if relay_binds[s][i] { relay } else { dest };
                min += relay.min(dest);
            }
            out.mc_binding += binding;
            out.mc_min += min;
        }
    }
    let n = spec.realizations as f64;
    for out in &mut outcomes {
        out.mc_binding /= n;
        out.mc_min /= n;
    }
    Some(outcomes)
}

fn mean_and_se(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| spec_err(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Runs every sweep point without judging the failure count.
pub fn run_sweep(spec: &SweepSpec, workers: Option<usize>) -> Result<SweepResult> {
    spec.validate()?;
    let opts = spec.alloc_options();
    let scale = spec.bandwidth_hz / 1e6;
    let mut rows = Vec::with_capacity(spec.values.len() * spec.schemes.len());
    for &value in &spec.values {
        let pt = spec.point(value)?;
        let outcomes: Vec<Option<Vec<SchemeOutcome>>> = with_pool(workers, || {
            (0..spec.trials as u64)
                .into_par_iter()
                .map(|t| run_trial(spec, &pt, t, &opts))
                .collect()
        })?;
        let ok: Vec<&Vec<SchemeOutcome>> = outcomes.iter().flatten().collect();
        let failed = spec.trials - ok.len();
        for (s, &scheme) in spec.schemes.iter().enumerate() {
            let col = ok.iter().map(|o| o[s]);
            let (mean_rate, std_error) = mean_and_se(col.clone().map(|o| o.analytic));
            let (mc_rate, mc_std_error) = mean_and_se(col.clone().map(|o| o.mc_binding));
            let (_, gap_std_error) = mean_and_se(col.clone().map(|o| o.mc_binding - o.analytic));
            let (mc_min_rate, _) = mean_and_se(col.clone().map(|o| o.mc_min));
            let (mean_k, _) = mean_and_se(col.clone().map(|o| o.iterations as f64));
            let wall_clock_ms = spec
                .timing
                .then(|| mean_and_se(col.clone().map(|o| o.elapsed_ms)).0);
            rows.push(SweepRow {
                sweep_value: value,
                scheme,
                mean_rate: mean_rate * scale,
                std_error: std_error * scale,
                mean_k,
                wall_clock_ms,
                mc_rate: mc_rate * scale,
                mc_std_error: mc_std_error * scale,
                gap_std_error: gap_std_error * scale,
                mc_min_rate: mc_min_rate * scale,
                trials: spec.trials,
                failed_trials: failed,
            });
        }
    }
    Ok(SweepResult {
        spec: spec.clone(),
        rows,
    })
}

/// Rate versus relay position along the source-disc/destination axis.
pub fn relay_sweep(spec: &SweepSpec, workers: Option<usize>) -> Result<SweepResult> {
    if spec.sweep_variable != SweepVariable::RelayPosition {
        return Err(spec_err(
            "relay_sweep needs sweep_variable = relay_position",
        ));
    }
    let res = run_sweep(spec, workers)?;
    res.check_failures()?;
    Ok(res)
}

/// Rate versus `M`, `P_s` or `P_r` with the relay held fixed.
pub fn scaling_sweep(spec: &SweepSpec, workers: Option<usize>) -> Result<SweepResult> {
    if spec.sweep_variable == SweepVariable::RelayPosition {
        return Err(spec_err("scaling_sweep needs sweep_variable = M, Ps or Pr"));
    }
    let res = run_sweep(spec, workers)?;
    res.check_failures()?;
    Ok(res)
}

/// Dispatches on the sweep variable.
pub fn sweep(spec: &SweepSpec, workers: Option<usize>) -> Result<SweepResult> {
    match spec.sweep_variable {
        SweepVariable::RelayPosition => relay_sweep(spec, workers),
        _ => scaling_sweep(spec, workers),
    }
}

/// Named experiment settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    FigM5,
    FigM25,
    FigRvsPs,
    FigScaling,
    FigRvsPr,
    FigBench,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::FigM5,
        Preset::FigM25,
        Preset::FigRvsPs,
        Preset::FigScaling,
        Preset::FigRvsPr,
        Preset::FigBench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::FigM5 => "fig-m5",
            Preset::FigM25 => "fig-m25",
            Preset::FigRvsPs => "fig-rvsps",
            Preset::FigScaling => "fig-scaling",
            Preset::FigRvsPr => "fig-rvspr",
            Preset::FigBench => "fig-bench",
        }
    }

    /// Sweeps making up the preset; empty for the benchmark preset.
    pub fn sweeps(self) -> Vec<SweepSpec> {
        let base =
            |name: &str, var: SweepVariable, values: Vec<f64>, m: usize, ps: f64, pr: f64| {
                SweepSpec {
                    name: name.to_string(),
                    sweep_variable: var,
                    values,
                    trials: default_trials(),
                    realizations: default_realizations(),
                    seed: 0,
                    schemes: default_schemes(),
                    m,
                    ps,
                    pr,
                    pr_per_user: None,
                    relay_position: default_relay(),
                    dest_position: 1.0,
                    alpha: 2.0,
                    nr: 1.0,
                    nd: 1.0,
                    bandwidth_hz: default_bandwidth(),
                    approximation: Approximation::default(),
                    timing: false,
                }
            };
        let positions: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        match self {
            Preset::FigM5 => vec![base(
                "fig-m5",
                SweepVariable::RelayPosition,
                positions,
                5,
                5.0,
                20.0,
            )],
            Preset::FigM25 => vec![base(
                "fig-m25",
                SweepVariable::RelayPosition,
                positions,
                25,
                3.0,
                75.0,
            )],
            Preset::FigRvsPs => vec![base(
                "fig-rvsps",
                SweepVariable::Ps,
                vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0],
                50,
                5.0,
                200.0,
            )],
            Preset::FigScaling => [1.0, 5.0]
                .into_iter()
                .map(|ps| {
                    let mut s = base(
                        &format!("fig-scaling-ps{ps}"),
                        SweepVariable::M,
                        vec![5.0, 10.0, 25.0, 50.0],
                        5,
                        ps,
                        20.0,
                    );
                    s.pr_per_user = Some(4.0);
                    s
                })
                .collect(),
            Preset::FigRvsPr => vec![base(
                "fig-rvspr",
                SweepVariable::Pr,
                vec![50.0, 100.0, 150.0, 200.0, 250.0, 300.0],
                50,
                5.0,
                200.0,
            )],
            Preset::FigBench => Vec::new(),
        }
    }

    pub fn bench(self) -> Option<BenchSpec> {
        (self == Preset::FigBench).then(BenchSpec::default)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| spec_err(format!("unknown preset `{s}`")))
    }
}

/// Timing benchmark on random topologies with `P_r = pr_per_user · M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub m_values: Vec<usize>,
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(rename = "Ps")]
    pub ps: f64,
    pub pr_per_user: f64,
    #[serde(default = "default_relay")]
    pub relay_position: f64,
    /// Minimum duration of one timed batch, in milliseconds.
    #[serde(default = "default_batch_ms")]
    pub min_batch_ms: f64,
}

fn default_batch_ms() -> f64 {
    0.5
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            m_values: vec![10, 25, 50, 100],
            repetitions: 15,
            seed: 0,
            schemes: default_schemes(),
            ps: 5.0,
            pr_per_user: 4.0,
            relay_position: default_relay(),
            min_batch_ms: default_batch_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub m: usize,
    pub scheme: Scheme,
    /// Median allocation time, excluding the shared per-user setup.
    pub median_ms: f64,
    /// Median time of the per-user setup (`β`, `ψ`, exact caps).
    pub setup_median_ms: f64,
    pub mean_k: f64,
    /// Operation counts of the allocation summed over repetitions.
    pub ops: OpTally,
    /// Operation counts of the setup summed over repetitions.
    pub setup_ops: OpTally,
    /// Outer iterations summed over repetitions.
    pub total_k: usize,
    pub repetitions: usize,
}

impl BenchRow {
    /// Average count of one operation per outer iteration.
    pub fn per_iteration(&self, count: u64) -> f64 {
        count as f64 / self.total_k.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub spec: BenchSpec,
    pub rows: Vec<BenchRow>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

impl BenchResult {
    pub fn row(&self, m: usize, scheme: Scheme) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.m == m && r.scheme == scheme)
    }

    /// Median-time ratio `num/den` at `m`.
    pub fn ratio(&self, m: usize, num: Scheme, den: Scheme) -> Option<f64> {
        Some(self.row(m, num)?.median_ms / self.row(m, den)?.median_ms)
    }

    /// Log-log growth exponent of the median time over all `M`.
    pub fn exponent(&self, scheme: Scheme) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.scheme == scheme)
            .map(|r| (r.m as f64, r.median_ms))
            .collect();
        loglog_slope(&pts)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "M",
            "scheme",
            "median_ms",
            "setup_median_ms",
            "mean_K",
            "mul_per_iter",
            "div_per_iter",
            "log_per_iter",
            "exp_per_iter",
            "e1_per_iter",
            "sqrt_per_iter",
            "cbrt_per_iter",
            "setup_e1_per_user",
            "setup_sqrt_per_user",
        ])?;
        for r in &self.rows {
            let per_user = |n: u64| (n as f64 / (r.m * r.repetitions.max(1)) as f64).to_string();
            w.write_record([
                r.m.to_string(),
                r.scheme.to_string(),
                r.median_ms.to_string(),
                r.setup_median_ms.to_string(),
                r.mean_k.to_string(),
                r.per_iteration(r.ops.mul).to_string(),
                r.per_iteration(r.ops.div).to_string(),
                r.per_iteration(r.ops.log).to_string(),
                r.per_iteration(r.ops.exp).to_string(),
                r.per_iteration(r.ops.e1).to_string(),
                r.per_iteration(r.ops.sqrt).to_string(),
                r.per_iteration(r.ops.cbrt).to_string(),
                per_user(r.setup_ops.e1),
                per_user(r.setup_ops.sqrt),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Median time of `f` in milliseconds, batching calls until one batch lasts
/// at least `min_batch_ms`.
fn time_ms(min_batch_ms: f64, mut f: impl FnMut()) -> f64 {
    let mut batch = 1usize;
    loop {
        let start = Instant::now();
        for _ in 0..batch {
            f();
        }
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if ms >= min_batch_ms || batch >= 1 << 20 {
            return ms / batch as f64;
        }
        batch = if ms <= 0.0 {
            batch * 16
        } else {
            (batch as f64 * (min_batch_ms / ms) * 1.2).ceil() as usize
        }
        .max(batch + 1);
    }
}

/// Single-threaded timing and operation census of each scheme.
pub fn bench(spec: &BenchSpec) -> Result<BenchResult> {
    if spec.m_values.is_empty() || spec.m_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(spec_err("m_values must be non-empty and nondecreasing"));
    }
    if spec.m_values[0] < 1 || spec.repetitions < 1 {
        return Err(spec_err("M and repetitions must be >= 1"));
    }
    let opts = AllocOptions::default();
    let mut rows = Vec::new();
    for &m in &spec.m_values {
        let pr = spec.pr_per_user * m as f64;
        let mut setup_times = Vec::with_capacity(spec.repetitions);
        let mut setup_ops = OpTally::default();
        let mut times = vec![Vec::with_capacity(spec.repetitions); spec.schemes.len()];
        let mut ops = vec![OpTally::default(); spec.schemes.len()];
        let mut ks = vec![0usize; spec.schemes.len()];
        for rep in 0..spec.repetitions as u64 {
            let layout =
                SourceLayout::sample(&mut stream_rng(spec.seed, stream(rep, STREAM_BENCH)), m);
            let coeffs: Vec<PathCoeffs> = layout
                .geometry(spec.relay_position, 1.0)
                .iter()
                .map(|u| PathCoeffs::from_geometry(u, 2.0, 1.0, 1.0))
                .collect();
            setup_times.push(time_ms(spec.min_batch_ms, || {
                std::hint::black_box(Scenario::from_coeffs(&coeffs, spec.ps, pr, &mut NoCount));
            }));
            let sc = Scenario::from_coeffs(&coeffs, spec.ps, pr, &mut setup_ops);
            for (s, &scheme) in spec.schemes.iter().enumerate() {
                let alloc = allocate_scenario(&sc, scheme, &opts, &mut ops[s])?;
                ks[s] += alloc.iterations;
                times[s].push(time_ms(spec.min_batch_ms, || {
                    std::hint::black_box(allocate_scenario(&sc, scheme, &opts, &mut NoCount).ok());
                }));
            }
        }
        let setup_median_ms = median(&mut setup_times);
        for (s, &scheme) in spec.schemes.iter().enumerate() {
            rows.push(BenchRow {
                m,
                scheme,
                median_ms: median(&mut times[s]),
                setup_median_ms,
                mean_k: ks[s] as f64 / spec.repetitions as f64,
                ops: ops[s],
                setup_ops,
                total_k: ks[s],
                repetitions: spec.repetitions,
            });
        }
    }
    Ok(BenchResult {
        spec: spec.clone(),
        rows,
    })
}

/// Record of one command run and the files it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub outputs: Vec<String>,
    /// `[sweep value, failed, total]` per sweep point, when applicable.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<(f64, usize, usize)>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp,
            outputs: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [10.0, 20.0, 40.0]
            .iter()
            .map(|&x: &f64| (x, 3.0 * x.powf(1.5)))
            .collect();
        assert!((loglog_slope(&pts) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert_eq!(Preset::FigScaling.sweeps().len(), 2);
        for s in Preset::ALL.iter().flat_map(|p| p.sweeps()) {
            s.validate().unwrap();
        }
    }

    #[test]
    fn pr_scales_with_m() {
        let s = &Preset::FigScaling.sweeps()[0];
        let pt = s.point(25.0).unwrap();
        assert_eq!(pt.m, 25);
        assert_eq!(pt.pr, 100.0);
    }
}
