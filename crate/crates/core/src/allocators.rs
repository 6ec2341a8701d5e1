//! Relay power allocation schemes.
//!
//! | scheme | method |
//! |--------|--------|
//! | [`Scheme::Pas0`]   | projected-gradient maximiser of the exact sum rate (reference) |
//! | [`Scheme::Pas1`]   | multiplier bisection on the stationarity quartic, then capping |
//! | [`Scheme::Pas2`]   | gain-sorted equal split with threshold drops, then capping |
//! | [`Scheme::Cwf`]    | classical water-filling on mean-channel gains |
//! | [`Scheme::Subop`]  | gain-sorted equal split without capping |
//! | [`Scheme::Oracle`] | exhaustive grid search, `M ≤ 3` |
//!
//! Every capped scheme freezes a user at the exact power `π_m` where
//! `R2m = R1m`; power beyond it is wasted because the relay can no longer
//! decode.
//!
//! ```
//! use dfrelay::allocators::{allocate, AllocOptions, Scheme};
//! use dfrelay::model::{NetworkConfig, UserGeometry};
//!
//! let u = UserGeometry { d_sr: 0.3, d_sd: 1.0, d_rd: 0.8 };
//! let cfg = NetworkConfig::normalized(2.0, 4.0, vec![u; 4]).unwrap();
//! let alloc = allocate(&cfg, Scheme::Pas1, &AllocOptions::default()).unwrap();
//! for p in &alloc.powers {
//!     assert!((p - 1.0).abs() < 1e-6);
//! }
//! ```

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gain_from_coeffs, LinkPower, NetworkConfig, PathCoeffs};
use crate::ops::{NoCount, Op, Ops};
use crate::quartic::{anchored_coeffs, constraint_power_with, Approximation, QuarticProblem};
use crate::rates::{exact_cap_with, r2m_value_slope, LOG2_E};
use crate::specfun::{g_counted, RationalTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Pas0,
    Pas1,
    Pas2,
    Cwf,
    Subop,
    Oracle,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Pas0,
        Scheme::Pas1,
        Scheme::Pas2,
        Scheme::Cwf,
        Scheme::Subop,
        Scheme::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Pas0 => "pas0",
            Scheme::Pas1 => "pas1",
            Scheme::Pas2 => "pas2",
            Scheme::Cwf => "cwf",
            Scheme::Subop => "subop",
            Scheme::Oracle => "oracle",
        }
    }

    /// Schemes that respect the per-user rate cap.
    pub fn is_capped(self) -> bool {
        matches!(
            self,
            Scheme::Pas0 | Scheme::Pas1 | Scheme::Pas2 | Scheme::Oracle
        )
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == key)
            .ok_or_else(|| Error::Spec(format!("unknown scheme `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Allocation {
    pub scheme: Scheme,
    pub powers: Vec<f64>,
    /// Outer iterations `K`.
    pub iterations: usize,
    pub capped_users: Vec<usize>,
    /// `|Σ P_m − P_r|`.
    pub residual: f64,
    /// Budget left over when every user sits at its cap.
    pub unspent: f64,
    /// False only for a reference run stopped by its iteration limit.
    pub converged: bool,
    /// Final multiplier `τ` of PAS-1.
    pub multiplier: Option<f64>,
}

impl Allocation {
    fn finish(
        scheme: Scheme,
        powers: Vec<f64>,
        iterations: usize,
        mut capped_users: Vec<usize>,
        pr: f64,
    ) -> Self {
        capped_users.sort_unstable();
        let total: f64 = powers.iter().sum();
        Allocation {
            scheme,
            powers,
            iterations,
            capped_users,
            residual: (total - pr).abs(),
            unspent: (pr - total).max(0.0),
            converged: true,
            multiplier: None,
        }
    }

    pub fn total(&self) -> f64 {
        self.powers.iter().sum()
    }

    /// Leading `#` lines carry scheme, K and residual; then `user,power,capped`.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "# scheme={}", self.scheme)?;
        writeln!(writer, "# K={}", self.iterations)?;
        writeln!(writer, "# residual={:e}", self.residual)?;
        writeln!(writer, "# unspent={:e}", self.unspent)?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["user", "power", "capped"])?;
        for (i, p) in self.powers.iter().enumerate() {
            let capped = self.capped_users.binary_search(&i).is_ok();
            w.write_record([i.to_string(), p.to_string(), capped.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocOptions {
    pub approximation: Approximation,
    /// Rows used when `approximation` is [`Approximation::Table`].
    pub table: RationalTable,
    pub max_outer: usize,
    pub pas0_max_iter: usize,
    pub pas0_tol: f64,
    /// Grid resolution of the oracle: step `P_r / oracle_steps`.
    pub oracle_steps: usize,
}

impl Default for AllocOptions {
    fn default() -> Self {
        AllocOptions {
            approximation: Approximation::Anchored,
            table: RationalTable::refit(),
            max_outer: 1000,
            pas0_max_iter: 10_000,
            pas0_tol: 1e-8,
            oracle_steps: 2000,
        }
    }
}

/// Statistical description of one user as seen by the allocators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UserChannel {
    pub k: PathCoeffs,
    /// `exp_e1(k_sd/P_s)`.
    pub beta: f64,
    /// `exp_e1(k_sr/P_s)`.
    pub psi: f64,
    /// Closed-form cap from the anchored rational form.
    pub cap_estimate: f64,
    /// Exact cap, `R2m(cap) = R1m`.
    pub cap: f64,
    /// `1/G_m` with mean-field channels.
    pub inv_gain: f64,
}

impl UserChannel {
    /// `(R2m, dR2m/dP)` at relay power `p`.
    #[inline]
    pub(crate) fn r2m<O: Ops>(&self, ps: f64, p: f64, ops: &mut O) -> (f64, f64) {
        let (v, s, n) = r2m_value_slope(self.k.k_sd, self.k.k_rd, ps, self.beta, p);
        ops.add(Op::E1, n);
        ops.add(Op::Exp, n);
        (v, s)
    }

    /// `(min(R1m, R2m), R2m)` at relay power `p`.
    pub(crate) fn rate<O: Ops>(&self, ps: f64, p: f64, ops: &mut O) -> (f64, f64) {
        let r2 = self.r2m(ps, p, ops).0;
        ((LOG2_E * self.psi).min(r2), r2)
    }
}

/// Per-user quantities shared by all schemes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub ps: f64,
    pub pr: f64,
    pub users: Vec<UserChannel>,
}

impl Scenario {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::from_coeffs(
            &cfg.all_path_coeffs(),
            cfg.ps,
            cfg.pr,
            &mut NoCount,
        ))
    }

    pub fn from_coeffs<O: Ops>(coeffs: &[PathCoeffs], ps: f64, pr: f64, ops: &mut O) -> Self {
        let link = LinkPower::mean_field();
        let users = coeffs
            .iter()
            .map(|k| {
                let beta = g_counted(k.k_sd / ps, ops);
                let psi = g_counted(k.k_sr / ps, ops);
                let anchored = anchored_coeffs(k.k_sd, ps, beta);
                ops.add(Op::Mul, 8);
                ops.add(Op::Div, 5);
                let est = constraint_power_with(k.k_rd, k.k_sd, ps, beta, psi, &anchored, ops);
                let (cap, evals) = exact_cap_with(k, ps, beta, psi, (est > 0.0).then_some(est));
                ops.add(Op::E1, evals);
                ops.add(Op::Exp, evals);
                let inv_gain = 1.0 / gain_from_coeffs(k, ps, link);
                ops.add(Op::Mul, 4);
                ops.add(Op::Div, 2);
                UserChannel {
                    k: *k,
                    beta,
                    psi,
                    cap_estimate: est,
                    cap,
                    inv_gain,
                }
            })
            .collect();
        Scenario { ps, pr, users }
    }

    pub fn m(&self) -> usize {
        self.users.len()
    }

    pub fn caps(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.cap).collect()
    }

    pub fn coeffs(&self) -> Vec<PathCoeffs> {
        self.users.iter().map(|u| u.k).collect()
    }

    /// `Σ min(R1m, R2m)` using the cached `β`, `ψ`.
    pub fn objective(&self, powers: &[f64]) -> f64 {
        self.users
            .iter()
            .zip(powers)
            .map(|(u, &p)| u.rate(self.ps, p, &mut NoCount).0)
            .sum()
    }
}

/// Classical water-filling `P_m = max(ν − n_m, 0)` with `Σ P_m = budget`.
pub fn water_fill(inv_gains: &[f64], budget: f64) -> Vec<f64> {
    water_fill_with(inv_gains, budget, &mut NoCount)
}

fn water_fill_with<O: Ops>(inv_gains: &[f64], budget: f64, ops: &mut O) -> Vec<f64> {
    let n = inv_gains.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| inv_gains[i].total_cmp(&inv_gains[j]).then(i.cmp(&j)));
    let mut prefix = 0.0;
    let mut level = inv_gains[order[0]] + budget;
    for (k, &i) in order.iter().enumerate() {
        prefix += inv_gains[i];
        let nu = (budget + prefix) / (k + 1) as f64;
        ops.one(Op::Div);
        let next = order.get(k + 1).map(|&j| inv_gains[j]);
        if next.is_none_or(|nx| nu <= nx) {
            level = nu;
            break;
        }
    }
    inv_gains.iter().map(|&v| (level - v).max(0.0)).collect()
}

/// Water-filling over mean-channel gains with budget `P_r`.
pub fn cwf_estimate(cfg: &NetworkConfig) -> Result<Allocation> {
    Ok(cwf_with(&Scenario::new(cfg)?, &mut NoCount))
}

fn cwf_with<O: Ops>(sc: &Scenario, ops: &mut O) -> Allocation {
    let inv: Vec<f64> = sc.users.iter().map(|u| u.inv_gain).collect();
    Allocation::finish(
        Scheme::Cwf,
        water_fill_with(&inv, sc.pr, ops),
        1,
        Vec::new(),
        sc.pr,
    )
}

/// Allocation by multiplier bisection on the stationarity quartic with
/// iterative capping.
pub fn pas1(cfg: &NetworkConfig, opts: &AllocOptions) -> Result<Allocation> {
    pas1_with(&Scenario::new(cfg)?, opts, &mut NoCount)
}

/// Per-user stationarity problems solved by PAS-1.
pub fn pas1_problems<O: Ops>(
    sc: &Scenario,
    opts: &AllocOptions,
    ops: &mut O,
) -> Result<Vec<QuarticProblem>> {
    Ok(match opts.approximation {
        Approximation::Anchored => sc
            .users
            .iter()
            .map(|u| QuarticProblem::anchored(u.k.k_rd, u.k.k_sd, sc.ps, u.beta))
            .collect(),
        Approximation::Table => {
            let inv: Vec<f64> = sc.users.iter().map(|u| u.inv_gain).collect();
            let est = water_fill_with(&inv, sc.pr, ops);
            let last = *opts.table.rows().last().ok_or(Error::EmptyTable)?;
            sc.users
                .iter()
                .zip(&est)
                .map(|(u, &p)| {
                    let row = if p > 0.0 {
                        opts.table.select(u.k.k_rd / p)?
                    } else {
                        last
                    };
                    ops.one(Op::Log);
                    Ok(QuarticProblem::table(
                        u.k.k_rd, u.k.k_sd, sc.ps, u.beta, row,
                    ))
                })
                .collect::<Result<_>>()?
        }
    })
}

pub fn pas1_with<O: Ops>(sc: &Scenario, opts: &AllocOptions, ops: &mut O) -> Result<Allocation> {
    let m = sc.m();
    let problems = pas1_problems(sc, opts, ops)?;
    let mut powers = vec![0.0; m];
    let mut tau;
    let mut active: Vec<usize> = (0..m).collect();
    let mut capped = Vec::new();
    let mut p_rem = sc.pr;
    let mut k = 0;
    let tol = 1e-6 * sc.pr;

    loop {
        k += 1;
        if k > opts.max_outer {
            return Err(Error::IterationCap {
                scheme: "pas1",
                limit: opts.max_outer,
            });
        }
        let (t, mut phi) = multiplier_search(&problems, &active, p_rem, tol, ops)?;
        tau = t;
        let s: f64 = phi.iter().sum();
        if s > 0.0 {
            let scale = p_rem / s;
            phi.iter_mut().for_each(|p| *p *= scale);
        }
        let violators: Vec<usize> = active
            .iter()
            .zip(&phi)
            .filter(|(&i, &p)| p > sc.users[i].cap)
            .map(|(&i, _)| i)
            .collect();
        if violators.is_empty() {
            for (&i, &p) in active.iter().zip(&phi) {
                powers[i] = p;
            }
            break;
        }
        if violators.len() == active.len() {
            for &i in &active {
                powers[i] = sc.users[i].cap;
                capped.push(i);
            }
            break;
        }
        for &i in &violators {
            powers[i] = sc.users[i].cap;
            p_rem -= sc.users[i].cap;
            capped.push(i);
        }
        active.retain(|i| !violators.contains(i));
    }
    let mut alloc = Allocation::finish(Scheme::Pas1, powers, k, capped, sc.pr);
    alloc.multiplier = Some(tau);
    Ok(alloc)
}

/// Geometric bisection on `τ` so that `Σ φ_m(τ) = target` over `active`.
/// Returns the final multiplier and the `φ` values there.
fn multiplier_search<O: Ops>(
    problems: &[QuarticProblem],
    active: &[usize],
    target: f64,
    tol: f64,
    ops: &mut O,
) -> Result<(f64, Vec<f64>)> {
    let eval = |tau: f64, ops: &mut O| -> Result<Vec<f64>> {
        active
            .iter()
            .map(|&i| problems[i].power(tau, ops))
            .collect()
    };
    let tau_lo = 1e-9;
    let phi_lo = eval(tau_lo, ops)?;
    let sum_lo: f64 = phi_lo.iter().sum();
    if sum_lo < target {
        return Err(Error::Bracket {
            target,
            tau_lo,
            sum_lo,
            tau_hi: tau_lo,
            sum_hi: sum_lo,
        });
    }
    if (sum_lo - target).abs() < tol {
        return Ok((tau_lo, phi_lo));
    }
    let mut lo = tau_lo;
    let mut hi = 1.0;
    let mut phi_hi = eval(hi, ops)?;
    let mut sum_hi: f64 = phi_hi.iter().sum();
    while sum_hi >= target {
        if (sum_hi - target).abs() < tol {
            return Ok((hi, phi_hi));
        }
        lo = hi;
        hi *= 2.0;
        if hi > 1e30 {
            return Err(Error::Bracket {
                target,
                tau_lo,
                sum_lo,
                tau_hi: hi,
                sum_hi,
            });
        }
        phi_hi = eval(hi, ops)?;
        sum_hi = phi_hi.iter().sum();
    }
    let mut best = (hi, phi_hi);
    let mut best_err = (sum_hi - target).abs();
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        ops.one(Op::Sqrt);
        let phi = eval(mid, ops)?;
        let s: f64 = phi.iter().sum();
        let err = (s - target).abs();
        if err < best_err {
            best_err = err;
            best = (mid, phi);
        }
        if err < tol || mid <= lo || mid >= hi {
            break;
        }
        if s > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

fn gain_order(sc: &Scenario) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sc.m()).collect();
    order.sort_by(|&i, &j| {
        sc.users[i]
            .inv_gain
            .total_cmp(&sc.users[j].inv_gain)
            .then(i.cmp(&j))
    });
    order
}

/// Drops the worst user while `1/G_worst ≥ budget + 1/G_best`.
fn threshold_drop(sc: &Scenario, survivors: &mut Vec<usize>, budget: f64) {
    while survivors.len() > 1 {
        let best = sc.users[survivors[0]].inv_gain;
        let worst = sc.users[survivors[survivors.len() - 1]].inv_gain;
        if worst >= budget + best {
            survivors.pop();
        } else {
            break;
        }
    }
}

/// Gain-sorted equal split with threshold drops and iterative capping.
pub fn pas2(cfg: &NetworkConfig, opts: &AllocOptions) -> Result<Allocation> {
    pas2_with(&Scenario::new(cfg)?, opts, &mut NoCount)
}

pub fn pas2_with<O: Ops>(sc: &Scenario, opts: &AllocOptions, ops: &mut O) -> Result<Allocation> {
    let m = sc.m();
    let mut survivors = gain_order(sc);
    let mut powers = vec![0.0; m];
    let mut capped = Vec::new();
    let mut p_rem = sc.pr;
    let mut k = 0;
    loop {
        k += 1;
        if k > opts.max_outer {
            return Err(Error::IterationCap {
                scheme: "pas2",
                limit: opts.max_outer,
            });
        }
        threshold_drop(sc, &mut survivors, p_rem);
        let share = p_rem / survivors.len() as f64;
        ops.one(Op::Div);
        let violators: Vec<usize> = survivors
            .iter()
            .copied()
            .filter(|&i| share > sc.users[i].cap)
            .collect();
        if violators.is_empty() {
            for &i in &survivors {
                powers[i] = share;
            }
            break;
        }
        if violators.len() == survivors.len() {
            for &i in &survivors {
                powers[i] = sc.users[i].cap;
                capped.push(i);
            }
            break;
        }
        for &i in &violators {
            powers[i] = sc.users[i].cap;
            p_rem -= sc.users[i].cap;
            capped.push(i);
        }
        survivors.retain(|i| !violators.contains(i));
    }
    Ok(Allocation::finish(Scheme::Pas2, powers, k, capped, sc.pr))
}

/// Gain-sorted threshold/equal split on mean channels, no rate caps.
pub fn subop(cfg: &NetworkConfig) -> Result<Allocation> {
    Ok(subop_with(&Scenario::new(cfg)?, &mut NoCount))
}

pub fn subop_with<O: Ops>(sc: &Scenario, ops: &mut O) -> Allocation {
    let mut survivors = gain_order(sc);
    threshold_drop(sc, &mut survivors, sc.pr);
    let share = sc.pr / survivors.len() as f64;
    ops.one(Op::Div);
    let mut powers = vec![0.0; sc.m()];
    for &i in &survivors {
        powers[i] = share;
    }
    Allocation::finish(Scheme::Subop, powers, 1, Vec::new(), sc.pr)
}

/// Euclidean projection onto `{Σ y = total, 0 ≤ y ≤ cap}`; requires
/// `Σ cap ≥ total`.
pub fn project_capped_simplex(z: &[f64], caps: &[f64], total: f64) -> Vec<f64> {
    let fill = |nu: f64| -> f64 {
        z.iter()
            .zip(caps)
            .map(|(&v, &c)| (v - nu).clamp(0.0, c))
            .sum()
    };
    let mut bps: Vec<f64> = z.iter().zip(caps).flat_map(|(&v, &c)| [v - c, v]).collect();
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    // fill is non-increasing in nu: fill(bps[0]) = Σ cap, fill(bps[last]) = 0.
    let (mut lo, mut hi) = (0usize, bps.len() - 1);
    if fill(bps[lo]) <= total {
        return caps.to_vec();
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fill(bps[mid]) >= total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (f_lo, f_hi) = (fill(bps[lo]), fill(bps[hi]));
    let nu = if f_lo == f_hi {
        bps[lo]
    } else {
        bps[lo] + (f_lo - total) * (bps[hi] - bps[lo]) / (f_lo - f_hi)
    };
    z.iter()
        .zip(caps)
        .map(|(&v, &c)| (v - nu).clamp(0.0, c))
        .collect()
}

/// Exact-rate maximiser: projected-gradient ascent with Armijo backtracking
/// on `{Σ P = P_r, 0 ≤ P_m ≤ π_m}`.
pub fn pas0_reference(cfg: &NetworkConfig, opts: &AllocOptions) -> Result<Allocation> {
    Ok(pas0_with(&Scenario::new(cfg)?, opts, &mut NoCount).0)
}

/// Also returns the objective after each accepted step.
pub fn pas0_with<O: Ops>(
    sc: &Scenario,
    opts: &AllocOptions,
    ops: &mut O,
) -> (Allocation, Vec<f64>) {
    let m = sc.m();
    let caps = sc.caps();
    let cap_total: f64 = caps.iter().sum();
    if cap_total <= sc.pr {
        let capped = (0..m).collect();
        return (
            Allocation::finish(Scheme::Pas0, caps, 0, capped, sc.pr),
            Vec::new(),
        );
    }
    let f = |p: &[f64], ops: &mut O| -> f64 {
        sc.users
            .iter()
            .zip(p)
            .map(|(u, &pm)| u.r2m(sc.ps, pm, ops).0)
            .sum()
    };
    let grad = |p: &[f64], ops: &mut O| -> Vec<f64> {
        sc.users
            .iter()
            .zip(p)
            .map(|(u, &pm)| u.r2m(sc.ps, pm, ops).1)
            .collect()
    };

    let start = vec![sc.pr / m as f64; m];
    let mut x = project_capped_simplex(&start, &caps, sc.pr);
    let mut fx = f(&x, ops);
    let mut history = vec![fx];
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.pas0_max_iter {
        iterations += 1;
        let gr = grad(&x, ops);
        let unit: Vec<f64> = x.iter().zip(&gr).map(|(a, b)| a + b).collect();
        let pg = project_capped_simplex(&unit, &caps, sc.pr);
        let pg_norm = x
            .iter()
            .zip(&pg)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if pg_norm < opts.pas0_tol {
            converged = true;
            break;
        }
        let mut s = step * 2.0;
        let mut accepted = false;
        for _ in 0..80 {
            let trial: Vec<f64> = x.iter().zip(&gr).map(|(a, b)| a + s * b).collect();
            let y = project_capped_simplex(&trial, &caps, sc.pr);
            let predicted: f64 = gr
                .iter()
                .zip(y.iter().zip(&x))
                .map(|(g, (a, b))| g * (a - b))
                .sum();
            if predicted <= 4.0 * f64::EPSILON * fx.abs() {
                // Remaining ascent is below the resolution of the objective.
                break;
            }
            let fy = f(&y, ops);
            if fy >= fx + 1e-4 * predicted {
                x = y;
                fx = fy;
                step = s;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            converged = pg_norm < opts.pas0_tol.max(1e-6);
            break;
        }
        history.push(fx);
    }

    let capped: Vec<usize> = (0..m)
        .filter(|&i| x[i] >= caps[i] * (1.0 - 1e-12))
        .collect();
    let mut alloc = Allocation::finish(Scheme::Pas0, x, iterations, capped, sc.pr);
    alloc.converged = converged;
    (alloc, history)
}

/// Exhaustive search on the grid `P_r·i/N` for `M ≤ 3`, with each user's
/// exact cap added as a candidate and the last user taking the remainder.
pub fn grid_oracle(cfg: &NetworkConfig, opts: &AllocOptions) -> Result<Allocation> {
    grid_oracle_scenario(&Scenario::new(cfg)?, opts)
}

pub fn grid_oracle_scenario(sc: &Scenario, opts: &AllocOptions) -> Result<Allocation> {
    let m = sc.m();
    if m > 3 {
        return Err(Error::TooManyUsers(m));
    }
    let caps = sc.caps();
    let pr = sc.pr;
    if caps.iter().sum::<f64>() <= pr {
        return Ok(Allocation::finish(
            Scheme::Oracle,
            caps,
            1,
            (0..m).collect(),
            pr,
        ));
    }
    if m == 1 {
        let p = pr.min(caps[0]);
        let capped = if caps[0] <= pr { vec![0] } else { Vec::new() };
        return Ok(Allocation::finish(Scheme::Oracle, vec![p], 1, capped, pr));
    }
    let n = opts.oracle_steps.max(1);
    let step = pr / n as f64;
    let grid_rate: Vec<Vec<f64>> = sc
        .users
        .iter()
        .map(|u| {
            (0..=n)
                .map(|i| u.r2m(sc.ps, i as f64 * step, &mut NoCount).0)
                .collect()
        })
        .collect();
    let exact = |user: usize, p: f64| sc.users[user].r2m(sc.ps, p, &mut NoCount).0;
    let slack = 1e-12 * pr;

    // Candidate list for one user: (power, grid index if on grid).
    let candidates = |user: usize| -> Vec<(f64, Option<usize>)> {
        let mut v: Vec<(f64, Option<usize>)> = (0..=n)
            .map(|i| (i as f64 * step, Some(i)))
            .filter(|(p, _)| *p <= caps[user])
            .collect();
        if caps[user] < pr {
            v.push((caps[user], None));
        }
        v
    };
    let value = |user: usize, c: (f64, Option<usize>)| match c.1 {
        Some(i) => grid_rate[user][i],
        None => exact(user, c.0),
    };

    let mut best = f64::NEG_INFINITY;
    let mut best_p = vec![0.0; m];
    for rem in 0..m {
        let others: Vec<usize> = (0..m).filter(|&i| i != rem).collect();
        let remainder = |used: f64, idx_sum: Option<usize>| -> Option<(f64, f64)> {
            let p = pr - used;
            if p < -slack || p > caps[rem] + slack {
                return None;
            }
            let p = p.clamp(0.0, caps[rem]);
            let v = match idx_sum {
                Some(s) if s <= n => grid_rate[rem][n - s],
                _ => exact(rem, p),
            };
            Some((p, v))
        };
        let c0 = candidates(others[0]);
        if m == 2 {
            for &a in &c0 {
                if let Some((p, v)) = remainder(a.0, a.1) {
                    let total = value(others[0], a) + v;
                    if total > best {
                        best = total;
                        best_p[others[0]] = a.0;
                        best_p[rem] = p;
                    }
                }
            }
        } else {
            let c1 = candidates(others[1]);
            for &a in &c0 {
                if a.0 > pr + slack {
                    continue;
                }
                let va = value(others[0], a);
                for &b in &c1 {
                    let used = a.0 + b.0;
                    if used > pr + slack {
                        continue;
                    }
                    let idx = match (a.1, b.1) {
                        (Some(i), Some(j)) => Some(i + j),
                        _ => None,
                    };
                    if let Some((p, v)) = remainder(used, idx) {
                        let total = va + value(others[1], b) + v;
                        if total > best {
                            best = total;
                            best_p[others[0]] = a.0;
                            best_p[others[1]] = b.0;
                            best_p[rem] = p;
                        }
                    }
                }
            }
        }
    }
    let capped = (0..m)
        .filter(|&i| best_p[i] >= caps[i] * (1.0 - 1e-12))
        .collect();
    Ok(Allocation::finish(Scheme::Oracle, best_p, 1, capped, pr))
}

/// Runs one scheme on a prepared scenario.
pub fn allocate_scenario<O: Ops>(
    sc: &Scenario,
    scheme: Scheme,
    opts: &AllocOptions,
    ops: &mut O,
) -> Result<Allocation> {
    match scheme {
        Scheme::Pas0 => Ok(pas0_with(sc, opts, ops).0),
        Scheme::Pas1 => pas1_with(sc, opts, ops),
        Scheme::Pas2 => pas2_with(sc, opts, ops),
        Scheme::Cwf => Ok(cwf_with(sc, ops)),
        Scheme::Subop => Ok(subop_with(sc, ops)),
        Scheme::Oracle => grid_oracle_scenario(sc, opts),
    }
}

pub fn allocate(cfg: &NetworkConfig, scheme: Scheme, opts: &AllocOptions) -> Result<Allocation> {
    allocate_scenario(&Scenario::new(cfg)?, scheme, opts, &mut NoCount)
}
