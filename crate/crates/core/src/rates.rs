//! Instantaneous and ergodic (statistical-CSI) achievable rates.
//!
//! With `s₁ = P_s/k_sd`, `s₂ = P_m/k_rd` and `h(s) = s·g(1/s)`, where
//! `g = exp_e1`, the destination-side ergodic rate is the divided difference
//! `R2m = log₂e · (h(s₂) − h(s₁))/(s₂ − s₁)`. Near `s₁ = s₂` the quotient is
//! replaced by Gauss–Legendre quadrature of `h'` over the segment, which is
//! the same quantity without the cancellation.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FadingDraw, NetworkConfig, PathCoeffs};
use crate::specfun::g;

pub const LOG2_E: f64 = std::f64::consts::LOG2_E;

/// Tolerance on `R2m ≤ R1m` used when flagging violations.
pub const FEASIBILITY_TOL: f64 = 1e-6;

const NEAR_SINGULAR: f64 = 0.05;
const ASYMPTOTIC_X: f64 = 1e3;

// 8-point Gauss–Legendre on [0, 1].
const GL_NODES: [f64; 8] = [
    0.019_855_071_751_231_856,
    0.101_666_761_293_186_64,
    0.237_233_795_041_835_5,
    0.408_282_678_752_175_1,
    0.591_717_321_247_825,
    0.762_766_204_958_164_5,
    0.898_333_238_706_813_4,
    0.980_144_928_248_768_2,
];
const GL_WEIGHTS: [f64; 8] = [
    0.050_614_268_145_188_13,
    0.111_190_517_226_687_24,
    0.156_853_322_938_943_64,
    0.181_341_891_689_181,
    0.181_341_891_689_181,
    0.156_853_322_938_943_64,
    0.111_190_517_226_687_24,
    0.050_614_268_145_188_13,
];

/// Instantaneous terms `(log₂(1 + P_s|h_sr|²/k_sr), log₂(1 + P_s|h_sd|²/k_sd + P_m|h_rd|²/k_rd))`
/// from squared magnitudes.
#[inline]
pub fn instantaneous_terms(
    sr2: f64,
    sd2: f64,
    rd2: f64,
    k: &PathCoeffs,
    ps: f64,
    pm: f64,
) -> (f64, f64) {
    let relay = (ps * sr2 / k.k_sr).ln_1p() * LOG2_E;
    let dest = (ps * sd2 / k.k_sd + pm * rd2 / k.k_rd).ln_1p() * LOG2_E;
    (relay, dest)
}

/// Instantaneous DF rate of one user for one fading draw.
pub fn instantaneous_rate(
    h_sr: Complex64,
    h_sd: Complex64,
    h_rd: Complex64,
    k: &PathCoeffs,
    ps: f64,
    pm: f64,
) -> f64 {
    let (a, b) = instantaneous_terms(h_sr.norm_sqr(), h_sd.norm_sqr(), h_rd.norm_sqr(), k, ps, pm);
    a.min(b)
}

/// [`instantaneous_rate`] for user `m` of a multi-user draw.
pub fn instantaneous_rate_of(draw: &FadingDraw, m: usize, k: &PathCoeffs, ps: f64, pm: f64) -> f64 {
    instantaneous_rate(draw.h_sr[m], draw.h_sd[m], draw.h_rd[m], k, ps, pm)
}

/// Ergodic source→relay rate `log₂e · g(k_sr/P_s)`.
pub fn rate_r1m(k_sr: f64, ps: f64) -> f64 {
    LOG2_E * g(k_sr / ps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct R2m {
    pub plus: f64,
    pub minus: f64,
    pub total: f64,
}

/// `h(s) = s·g(1/s)`, with `h(0) = 0`.
#[cfg(test)]
fn h(s: f64) -> f64 {
    if s == 0.0 {
        0.0
    } else {
        s * g(1.0 / s)
    }
}

/// `(h'(s), h''(s))` at `s = 1/x` given `g(x)`:
/// `h' = 1 + (1 − x)·g`, `h'' = x³g + x − x²`. Large `x` uses the
/// asymptotic series, where the closed forms cancel.
#[inline]
fn h_derivs(x: f64, gx: f64) -> (f64, f64) {
    if x > ASYMPTOTIC_X {
        let y = 1.0 / x;
        // h' = Σ (−1)^{n−1} (n−1)!(n+1) / xⁿ, h'' = Σ (−1)ⁿ (n+2)! / xⁿ
        let hp = y * (2.0 + y * (-3.0 + y * (8.0 + y * (-30.0 + y * (144.0 + y * (-840.0))))));
        let hpp = 2.0 + y * (-6.0 + y * (24.0 + y * (-120.0 + y * (720.0 + y * (-5040.0)))));
        (hp, hpp)
    } else {
        (1.0 + (1.0 - x) * gx, x * x * x * gx + x - x * x)
    }
}

#[inline]
fn h_derivs_at(s: f64) -> (f64, f64) {
    if s == 0.0 {
        return (0.0, 2.0);
    }
    let x = 1.0 / s;
    let gx = if x > ASYMPTOTIC_X { 0.0 } else { g(x) };
    h_derivs(x, gx)
}

#[cfg(test)]
fn h_prime(s: f64) -> f64 {
    h_derivs_at(s).0
}

#[cfg(test)]
fn h_second(s: f64) -> f64 {
    h_derivs_at(s).1
}

#[inline]
fn near_singular(s1: f64, s2: f64) -> bool {
    (s2 - s1).abs() < NEAR_SINGULAR * s1.max(s2)
}

/// Divided difference `(h(s₂) − h(s₁))/(s₂ − s₁)` and its `s₂`-derivative,
/// with `β = g(1/s₁)` supplied. Returns the number of `g` evaluations.
fn divided_difference(s1: f64, beta: f64, s2: f64) -> (f64, f64, u64) {
    let d = s2 - s1;
    if s2 == 0.0 {
        return (beta, beta / s1, 0);
    }
    if near_singular(s1, s2) {
        let mut val = 0.0;
        let mut slope = 0.0;
        for (&t, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
            let (hp, hpp) = h_derivs_at(s1 + t * d);
            val += w * hp;
            slope += w * t * hpp;
        }
        (val, slope, GL_NODES.len() as u64)
    } else {
        let x2 = 1.0 / s2;
        let g2 = g(x2);
        let dd = (s2 * g2 - s1 * beta) / d;
        let (hp2, _) = h_derivs(x2, g2);
        (dd, (hp2 - dd) / d, 1)
    }
}

/// Exact `R2m` and `dR2m/dP_m` with `β = exp_e1(k_sd/P_s)` precomputed,
/// plus the number of `exp_e1` evaluations spent.
#[inline]
pub(crate) fn r2m_value_slope(
    k_sd: f64,
    k_rd: f64,
    ps: f64,
    beta: f64,
    pm: f64,
) -> (f64, f64, u64) {
    let (dd, slope, n) = divided_difference(ps / k_sd, beta, pm.max(0.0) / k_rd);
    (LOG2_E * dd, LOG2_E / k_rd * slope, n)
}

/// Ergodic destination-side rate and its split into relay gain and direct part.
pub fn rate_r2m(k_sd: f64, k_rd: f64, ps: f64, pm: f64) -> R2m {
    let beta = g(k_sd / ps);
    let minus = LOG2_E * beta;
    if pm <= 0.0 {
        return R2m {
            plus: 0.0,
            minus,
            total: minus,
        };
    }
    let total = r2m_value_slope(k_sd, k_rd, ps, beta, pm).0;
    R2m {
        plus: total - minus,
        minus,
        total,
    }
}

/// `dR2m/dP_m`.
pub fn marginal_r2m(k_sd: f64, k_rd: f64, ps: f64, pm: f64) -> f64 {
    r2m_value_slope(k_sd, k_rd, ps, g(k_sd / ps), pm).1
}

/// Largest relay power with `R2m ≤ R1m`, from exact rates.
///
/// `R2m` is concave and increasing in `P_m`, so Newton iterates started to
/// the left of the root approach it monotonically from below and the
/// returned power never overshoots. `seed` is an optional starting guess.
pub fn exact_cap(k: &PathCoeffs, ps: f64, seed: Option<f64>) -> f64 {
    let beta = g(k.k_sd / ps);
    let psi = g(k.k_sr / ps);
    exact_cap_with(k, ps, beta, psi, seed).0
}

/// [`exact_cap`] from precomputed `β`, `ψ`; also returns the number of
/// `exp_e1` evaluations spent.
pub(crate) fn exact_cap_with(
    k: &PathCoeffs,
    ps: f64,
    beta: f64,
    psi: f64,
    seed: Option<f64>,
) -> (f64, u64) {
    if psi <= beta {
        return (0.0, 0);
    }
    let r1 = LOG2_E * psi;
    let mut evals = 0u64;
    let mut eval = |p: f64| {
        let (v, s, n) = r2m_value_slope(k.k_sd, k.k_rd, ps, beta, p);
        evals += n;
        (v - r1, s)
    };

    let (mut p, (mut fp, mut sp)) = (0.0, eval(0.0));
    if let Some(s) = seed.filter(|s| s.is_finite() && *s > 0.0) {
        let (fs, ss) = eval(s);
        if fs == 0.0 {
            return (s, evals);
        }
        if fs < 0.0 {
            (p, fp, sp) = (s, fs, ss);
        } else {
            // A tangent taken right of the root of a concave function lands left of it.
            let x1 = s - fs / ss;
            if x1.is_finite() && x1 > 0.0 {
                let (f1, s1) = eval(x1);
                if f1 == 0.0 {
                    return (x1, evals);
                }
                if f1 < 0.0 {
                    (p, fp, sp) = (x1, f1, s1);
                }
            }
        }
    }
    for _ in 0..200 {
        if fp >= 0.0 {
            break;
        }
        let step = -fp / sp;
        if !step.is_finite() || step <= 0.0 {
            break;
        }
        let next = p + step;
        let (f_next, s_next) = eval(next);
        if f_next > 0.0 {
            // Rounding put the tangent root past the true one; stay on the left side.
            if step <= 1e-12 * next {
                return (p, evals);
            }
            let (mut lo, mut hi) = (p, next);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi || hi - lo <= 1e-15 * hi {
                    break;
                }
                if eval(mid).0 > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return (lo, evals);
        }
        if step <= 1e-15 * next {
            return (next, evals);
        }
        (p, fp, sp) = (next, f_next, s_next);
    }
    (p, evals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binding {
    R1m,
    R2m,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserRate {
    pub user: usize,
    pub power: f64,
    pub r1m: f64,
    pub r2m_plus: f64,
    pub r2m_minus: f64,
    pub r2m: f64,
    pub binding: Binding,
}

impl UserRate {
    pub fn rate(&self) -> f64 {
        self.r1m.min(self.r2m)
    }
}

pub fn user_rate(user: usize, k: &PathCoeffs, ps: f64, pm: f64) -> UserRate {
    let r1m = rate_r1m(k.k_sr, ps);
    let r2 = rate_r2m(k.k_sd, k.k_rd, ps, pm);
    UserRate {
        user,
        power: pm,
        r1m,
        r2m_plus: r2.plus,
        r2m_minus: r2.minus,
        r2m: r2.total,
        binding: if r1m < r2.total {
            Binding::R1m
        } else {
            Binding::R2m
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub per_user: Vec<UserRate>,
    /// Σ min(R1m, R2m) in bits/s/Hz.
    pub system_rate: f64,
    /// Users with `P_m > 0` and `R2m > R1m + 1e-6`. At zero power the
    /// excess cannot be removed, so it is not counted.
    pub violations: Vec<usize>,
    pub bandwidth_hz: f64,
}

impl RateReport {
    pub fn system_rate_mbps(&self) -> f64 {
        self.system_rate * self.bandwidth_hz / 1e6
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["user", "r1m", "r2m_plus", "r2m_minus", "r2m", "binding"])?;
        for u in &self.per_user {
            w.write_record([
                u.user.to_string(),
                u.r1m.to_string(),
                u.r2m_plus.to_string(),
                u.r2m_minus.to_string(),
                u.r2m.to_string(),
                match u.binding {
                    Binding::R1m => "r1m".to_string(),
                    Binding::R2m => "r2m".to_string(),
                },
            ])?;
        }
        w.write_record([
            "system_rate".to_string(),
            String::new(),
            String::new(),
            String::new(),
            self.system_rate.to_string(),
            String::new(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

pub fn rate_report(
    coeffs: &[PathCoeffs],
    ps: f64,
    powers: &[f64],
    bandwidth_hz: f64,
) -> Result<RateReport> {
    if coeffs.len() != powers.len() {
        return Err(Error::Config {
            field: "powers".into(),
            reason: format!("has {} entries for {} users", powers.len(), coeffs.len()),
        });
    }
    if let Some((i, p)) = powers
        .iter()
        .enumerate()
        .find(|(_, p)| !(p.is_finite() && **p >= 0.0))
    {
        return Err(Error::Config {
            field: format!("powers[{i}]"),
            reason: format!("must be finite and >= 0, got {p}"),
        });
    }
    let per_user: Vec<UserRate> = coeffs
        .iter()
        .zip(powers)
        .enumerate()
        .map(|(i, (k, &p))| user_rate(i, k, ps, p))
        .collect();
    let system_rate = per_user.iter().map(UserRate::rate).sum();
    let violations = per_user
        .iter()
        .filter(|u| u.power > 0.0 && u.r2m > u.r1m + FEASIBILITY_TOL)
        .map(|u| u.user)
        .collect();
    Ok(RateReport {
        per_user,
        system_rate,
        violations,
        bandwidth_hz,
    })
}

/// Σ min(R1m, R2m) for the given relay powers.
pub fn system_rate(cfg: &NetworkConfig, powers: &[f64]) -> Result<RateReport> {
    rate_report(&cfg.all_path_coeffs(), cfg.ps, powers, cfg.bandwidth_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asymptotic_branches_match_direct_forms() {
        for &x in &[900.0, 1000.0, 1100.0] {
            let s = 1.0 / x;
            let gx = g(x);
            let direct1 = 1.0 + (1.0 - x) * gx;
            let direct2 = x * x * x * gx + x - x * x;
            assert!((h_prime(s) - direct1).abs() < 1e-10 * direct1, "h' at {x}");
            assert!((h_second(s) - direct2).abs() < 1e-7 * direct2, "h'' at {x}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for &s in &[0.05, 0.3, 1.0, 4.0, 30.0] {
            let e = 1e-5 * s;
            let fd1 = (h(s + e) - h(s - e)) / (2.0 * e);
            let fd2 = (h_prime(s + e) - h_prime(s - e)) / (2.0 * e);
            assert!(
                (h_prime(s) - fd1).abs() < 1e-7 * fd1.abs().max(1.0),
                "h' at {s}"
            );
            assert!(
                (h_second(s) - fd2).abs() < 1e-6 * fd2.abs().max(1.0),
                "h'' at {s}"
            );
        }
    }

    #[test]
    fn quadrature_branch_is_continuous() {
        let s1 = 2.0;
        for &f in &[
            1.0 - NEAR_SINGULAR * 1.0001,
            1.0 - NEAR_SINGULAR * 0.9999,
            1.0 + NEAR_SINGULAR * 0.9999,
        ] {
            let s2 = s1 * f;
            let dd = (h(s2) - h(s1)) / (s2 - s1);
            let q = divided_difference(s1, g(1.0 / s1), s2).0;
            assert!((dd - q).abs() < 1e-12, "{dd} vs {q}");
        }
    }

    #[test]
    fn marginal_at_zero_power() {
        let (k_sd, k_rd, ps) = (1.7, 0.4, 2.0);
        let beta = g(k_sd / ps);
        let expect = LOG2_E * beta * k_sd / (ps * k_rd);
        let got = marginal_r2m(k_sd, k_rd, ps, 0.0);
        assert!((got - expect).abs() < 1e-12 * expect);
    }
}
