//! Stationarity quartic of the approximated relay rate and the rate-constraint
//! power.
//!
//! With `A = k_rd`, `K = P_s/k_sd`, `L = log₂e` and multiplier `τ`, the
//! stationarity condition `dR2m/dP = τL²` becomes
//! `P⁴ + λ₁P³ + λ₂P² + λ₃P − λ₄ = 0` once `g(k_rd/P)` in the exact derivative
//! is replaced by the rational form. The substitution happens after
//! differentiating, so the roots are not stationary points of the
//! approximated rate itself.
//!
//! When the rational form is anchored at `x₀ = k_sd/P_s` (value, slope and
//! curvature of `g` matched there), `P₀ = A·K` is a double root. The remaining
//! quadratic factor carries the stationary point, so [`Approximation::Anchored`]
//! solves that quadratic instead of the full quartic.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{NoCount, Op, Ops};
use crate::rates::LOG2_E;
use crate::specfun::{g, RationalCoeffs};

const ETA1_ZERO: f64 = 1e-10;
const IMAG_TOL: f64 = 1e-6;
const RESIDUAL_TOL: f64 = 1e-6;

/// Coefficients of `P⁴ + λ₁P³ + λ₂P² + λ₃P − λ₄`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
}

impl Lambdas {
    #[inline]
    pub fn eval(&self, p: f64) -> f64 {
        (((p + self.l1) * p + self.l2) * p + self.l3) * p - self.l4
    }

    #[inline]
    pub fn deriv(&self, p: f64) -> f64 {
        ((4.0 * p + 3.0 * self.l1) * p + 2.0 * self.l2) * p + self.l3
    }

    /// `|Q(p)| / max(1, λ₄)`.
    pub fn residual(&self, p: f64) -> f64 {
        self.eval(p).abs() / self.l4.abs().max(1.0)
    }

    /// `|Q(p)|` relative to the largest term of the sum at `p`.
    fn scaled_residual(&self, p: f64) -> f64 {
        let p2 = p * p;
        let scale = (p2 * p2)
            .max((self.l1 * p2 * p).abs())
            .max((self.l2 * p2).abs())
            .max((self.l3 * p).abs())
            .max(self.l4.abs());
        self.eval(p).abs() / scale.max(f64::MIN_POSITIVE)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.l1, self.l2, self.l3, self.l4]
    }
}

/// λ₁..λ₄ for one user.
pub fn depressed_coeffs(
    k_rd: f64,
    k_sd: f64,
    ps: f64,
    beta: f64,
    coeffs: &RationalCoeffs,
    tau: f64,
) -> Lambdas {
    let (a, b, c) = (coeffs.a, coeffs.b, coeffs.c);
    let aa = k_rd;
    let k = ps / k_sd;
    let lt = LOG2_E * tau;
    Lambdas {
        l1: -2.0 * aa * k + aa / c - 1.0 / lt,
        l2: aa / c * (aa * k * k * c - 2.0 * aa * k + (k * (b + c * (1.0 - beta)) + b - 1.0) / lt),
        l3: aa * aa * (aa * k * k * lt + k * a - k * b - k * beta + k + a) / (c * lt),
        l4: aa * aa * aa * k * a / (c * lt),
    }
}

/// Closed-form intermediates, kept for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuarticTrace {
    pub lambdas: Lambdas,
    pub upsilon1: f64,
    pub upsilon2: f64,
    pub theta: Complex64,
    pub eta1: Complex64,
    pub eta2: Complex64,
    pub eta3: Complex64,
    pub roots: [Complex64; 4],
    pub root: f64,
    pub fallback: bool,
}

/// Largest positive real root of the quartic.
pub fn solve_quartic(l: &Lambdas) -> Result<f64> {
    solve_quartic_traced(l, &mut NoCount).map(|t| t.root)
}

/// Ferrari's method in complex arithmetic. The resolvent cube-root branch
/// is the one giving the largest `|η₁|`; the four candidate roots are
/// polished by Newton steps on the real polynomial and the largest positive
/// real one is returned. If none passes the residual check the root is found
/// by bracketing instead.
pub fn solve_quartic_traced<O: Ops>(l: &Lambdas, ops: &mut O) -> Result<QuarticTrace> {
    if !(l.l1.is_finite() && l.l2.is_finite() && l.l3.is_finite() && l.l4.is_finite()) {
        return Err(Error::NoPositiveRoot {
            lambdas: l.as_array(),
        });
    }
    let (a, b, c, d) = (l.l1, l.l2, l.l3, -l.l4);

    let delta0 = b * b - 3.0 * a * c + 12.0 * d;
    let upsilon1 =
        2.0 * b * b * b - 9.0 * a * b * c + 27.0 * c * c + 27.0 * a * a * d - 72.0 * b * d;
    let upsilon2 = -4.0 * delta0 * delta0 * delta0;
    ops.add(Op::Mul, 22);

    let disc = Complex64::new(upsilon1 * upsilon1 + upsilon2, 0.0).sqrt();
    ops.one(Op::Sqrt);
    let plus = (upsilon1 + disc) * 0.5;
    let minus = (upsilon1 - disc) * 0.5;
    let base = if plus.norm() >= minus.norm() {
        plus
    } else {
        minus
    };
    let cube = base.cbrt();
    ops.one(Op::Cbrt);

    let omega = Complex64::new(-0.5, 0.75f64.sqrt());
    let q = a * a / 4.0 - b;
    let mut theta = Complex64::new(b / 3.0, 0.0);
    let mut best = f64::NEG_INFINITY;
    let mut branch = cube;
    for _ in 0..3 {
        let y = if branch.norm() == 0.0 {
            Complex64::new(b / 3.0, 0.0)
        } else {
            (b + branch + delta0 / branch) / 3.0
        };
        let size = (q + y).norm();
        if size > best {
            best = size;
            theta = y;
        }
        branch *= omega;
    }
    ops.add(Op::Div, 6);
    ops.add(Op::Mul, 6);

    let eta1 = (q + theta).sqrt();
    ops.one(Op::Sqrt);
    let base2 = 0.75 * a * a - 2.0 * b;
    let (eta2, eta3) = if eta1.norm() > ETA1_ZERO * (1.0 + a.abs()) {
        let t = (4.0 * a * b - 8.0 * c - a * a * a) / (4.0 * eta1);
        let r2 = eta1 * eta1;
        ops.add(Op::Mul, 8);
        ops.one(Op::Div);
        ((base2 - r2 + t).sqrt(), (base2 - r2 - t).sqrt())
    } else {
        let s = (theta * theta - 4.0 * d).sqrt();
        ops.one(Op::Sqrt);
        ops.add(Op::Mul, 4);
        ((base2 + 2.0 * s).sqrt(), (base2 - 2.0 * s).sqrt())
    };
    ops.add(Op::Sqrt, 2);

    let shift = -a / 4.0;
    let roots = [
        shift + (eta1 + eta2) * 0.5,
        shift + (eta1 - eta2) * 0.5,
        shift + (-eta1 + eta3) * 0.5,
        shift + (-eta1 - eta3) * 0.5,
    ];
    ops.add(Op::Mul, 5);

    let mut root: Option<f64> = None;
    for z in roots {
        if z.re <= 0.0 || z.im.abs() > IMAG_TOL * z.re.abs().max(1.0) {
            continue;
        }
        let p = polish(l, z.re, ops);
        if p > 0.0 && l.scaled_residual(p) < 1e-9 && root.is_none_or(|r| p > r) {
            root = Some(p);
        }
    }

    let (root, fallback) = match root {
        Some(r) if l.residual(r) < RESIDUAL_TOL || l.scaled_residual(r) < 1e-12 => (r, false),
        _ => (
            bracket_largest_root(l).ok_or(Error::NoPositiveRoot {
                lambdas: l.as_array(),
            })?,
            true,
        ),
    };

    Ok(QuarticTrace {
        lambdas: *l,
        upsilon1,
        upsilon2,
        theta,
        eta1,
        eta2,
        eta3,
        roots,
        root,
        fallback,
    })
}

fn polish<O: Ops>(l: &Lambdas, mut p: f64, ops: &mut O) -> f64 {
    let mut r = l.eval(p).abs();
    for _ in 0..4 {
        let dp = l.deriv(p);
        if dp == 0.0 || r == 0.0 {
            break;
        }
        let next = p - l.eval(p) / dp;
        ops.add(Op::Mul, 14);
        ops.one(Op::Div);
        let rn = l.eval(next).abs();
        if rn.is_nan() || rn >= r {
            break;
        }
        p = next;
        r = rn;
    }
    p
}

/// Largest positive sign change of `Q` on `(0, B]` with `B` the Cauchy bound,
/// refined by bisection.
fn bracket_largest_root(l: &Lambdas) -> Option<f64> {
    let bound = 1.0 + l.l1.abs().max(l.l2.abs()).max(l.l3.abs()).max(l.l4.abs());
    const STEPS: usize = 4000;
    let lo_exp = -30.0f64;
    let hi_exp = bound.log10();
    let mut prev_x = bound;
    let mut prev_v = l.eval(bound);
    for i in 1..=STEPS {
        let e = hi_exp - (hi_exp - lo_exp) * i as f64 / STEPS as f64;
        let x = 10f64.powf(e);
        let v = l.eval(x);
        if (v <= 0.0) != (prev_v <= 0.0) || v == 0.0 {
            let (mut lo, mut hi) = (x, prev_x);
            let lo_neg = v <= 0.0;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if (l.eval(mid) <= 0.0) == lo_neg {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        prev_x = x;
        prev_v = v;
    }
    None
}

/// How the rational form of `g(k_rd/P)` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approximation {
    /// Padé-type fit of `g` at `x₀ = k_sd/P_s`; removes the spurious pole.
    #[default]
    Anchored,
    /// Row of the coefficient table picked by the water-filling estimate.
    Table,
}

impl std::str::FromStr for Approximation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "anchored" => Ok(Approximation::Anchored),
            "table" => Ok(Approximation::Table),
            other => Err(Error::Spec(format!("unknown approximation `{other}`"))),
        }
    }
}

/// Rational form matching `g`, `g'` and `g''` at `x₀ = k_sd/P_s`, where
/// `g(x₀) = β`. The pole `−c` is negative by the bound
/// `g(x) < (x + 1)/(x(x + 2))`.
pub fn anchored_coeffs(k_sd: f64, ps: f64, beta: f64) -> RationalCoeffs {
    let x0 = k_sd / ps;
    let g1 = beta - 1.0 / x0;
    let g2 = g1 + 1.0 / (x0 * x0);
    let cx = -2.0 * g1 / g2;
    let c = cx - x0;
    let a = g1 * cx + beta;
    let b = beta * c - g1 * x0 * cx;
    RationalCoeffs {
        range_lo_db: f64::NEG_INFINITY,
        range_hi_db: f64::INFINITY,
        a,
        b,
        c,
    }
}

/// Per-user data needed to evaluate the stationary power `φ(τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuarticProblem {
    pub k_rd: f64,
    pub k_sd: f64,
    pub ps: f64,
    pub beta: f64,
    pub coeffs: RationalCoeffs,
    pub approximation: Approximation,
}

impl QuarticProblem {
    pub fn anchored(k_rd: f64, k_sd: f64, ps: f64, beta: f64) -> Self {
        QuarticProblem {
            k_rd,
            k_sd,
            ps,
            beta,
            coeffs: anchored_coeffs(k_sd, ps, beta),
            approximation: Approximation::Anchored,
        }
    }

    pub fn table(k_rd: f64, k_sd: f64, ps: f64, beta: f64, coeffs: RationalCoeffs) -> Self {
        QuarticProblem {
            k_rd,
            k_sd,
            ps,
            beta,
            coeffs,
            approximation: Approximation::Table,
        }
    }

    pub fn lambdas(&self, tau: f64) -> Lambdas {
        depressed_coeffs(self.k_rd, self.k_sd, self.ps, self.beta, &self.coeffs, tau)
    }

    /// Stationary power `φ(τ) ≥ 0`.
    pub fn power<O: Ops>(&self, tau: f64, ops: &mut O) -> Result<f64> {
        match self.approximation {
            Approximation::Anchored => Ok(self.deflated_root(tau, ops)),
            Approximation::Table => {
                let l = self.lambdas(tau);
                ops.add(Op::Mul, 24);
                ops.add(Op::Div, 6);
                let t = solve_quartic_traced(&l, ops)?;
                Ok(self.continued_root(&l, &t, ops).max(0.0))
            }
        }
    }

    /// Larger root of `P² + μ₁P + μ₀`, the quartic with `(P − P₀)²` divided out.
    fn deflated_root<O: Ops>(&self, tau: f64, ops: &mut O) -> f64 {
        let RationalCoeffs { a, c, .. } = self.coeffs;
        let k = self.ps / self.k_sd;
        let lt = LOG2_E * tau;
        let mu1 = self.k_rd / c - 1.0 / lt;
        let mu0 = -self.k_rd * a / (c * lt * k);
        let disc = mu1 * mu1 - 4.0 * mu0;
        ops.add(Op::Mul, 6);
        ops.add(Op::Div, 3);
        if disc < 0.0 {
            return 0.0;
        }
        let sq = disc.sqrt();
        ops.one(Op::Sqrt);
        ops.one(Op::Div);
        let r = if mu1 > 0.0 {
            -2.0 * mu0 / (mu1 + sq)
        } else {
            0.5 * (sq - mu1)
        };
        r.max(0.0)
    }

    /// With table coefficients the double root at `P₀` splits into a pair
    /// that stays near the pole of the substituted derivative for every `τ`.
    /// Picks the positive root closest to the larger root of the quotient by
    /// `(P − P₀)²`, which is the root that tends to zero as `τ` grows.
    fn continued_root<O: Ops>(&self, l: &Lambdas, t: &QuarticTrace, ops: &mut O) -> f64 {
        let p0 = self.ps / self.k_sd * self.k_rd;
        let mu1 = l.l1 + 2.0 * p0;
        let mu0 = l.l2 + 2.0 * p0 * mu1 - p0 * p0;
        let disc = mu1 * mu1 - 4.0 * mu0;
        ops.add(Op::Mul, 5);
        let target = if disc < 0.0 {
            0.0
        } else {
            ops.one(Op::Sqrt);
            (0.5 * (disc.sqrt() - mu1)).max(0.0)
        };
        let mut best = t.root;
        for z in t.roots {
            if z.re <= 0.0 || z.im.abs() > IMAG_TOL * z.re.abs().max(1.0) {
                continue;
            }
            let p = polish(l, z.re, ops);
            if p > 0.0 && l.scaled_residual(p) < 1e-9 && (p - target).abs() < (best - target).abs()
            {
                best = p;
            }
        }
        best
    }

    pub fn trace(&self, tau: f64) -> Result<QuarticTrace> {
        solve_quartic_traced(&self.lambdas(tau), &mut NoCount)
    }
}

/// Stationary power from the full quartic with the given coefficients.
pub fn kkt_power(
    k_rd: f64,
    k_sd: f64,
    ps: f64,
    beta: f64,
    coeffs: &RationalCoeffs,
    tau: f64,
) -> Result<f64> {
    QuarticProblem::table(k_rd, k_sd, ps, beta, *coeffs).power(tau, &mut NoCount)
}

/// Power at which the approximated `R2m` reaches `R1m`.
///
/// Roots of `k₁P² + k₂P + k₃ = 0` with `k₁ = b − cψ`,
/// `k₂ = A(a − ψ) + cKA(ψ − β)`, `k₃ = KA²(ψ − β)`. A root at the removable
/// point `P₀ = KA`, where the rate expression is 0/0, is ignored. Returns
/// the smallest remaining positive root, or 0 when there is none
/// (admission refused).
pub fn constraint_power(k_rd: f64, k_sr: f64, k_sd: f64, ps: f64, coeffs: &RationalCoeffs) -> f64 {
    constraint_power_with(
        k_rd,
        k_sd,
        ps,
        g(k_sd / ps),
        g(k_sr / ps),
        coeffs,
        &mut NoCount,
    )
}

pub(crate) fn constraint_power_with<O: Ops>(
    k_rd: f64,
    k_sd: f64,
    ps: f64,
    beta: f64,
    psi: f64,
    coeffs: &RationalCoeffs,
    ops: &mut O,
) -> f64 {
    if psi <= beta {
        return 0.0;
    }
    let RationalCoeffs { a, b, c, .. } = *coeffs;
    let aa = k_rd;
    let k = ps / k_sd;
    let gap = psi - beta;
    let k1 = b - c * psi;
    let k2 = aa * (a - psi) + c * k * aa * gap;
    let k3 = k * aa * aa * gap;
    ops.add(Op::Mul, 9);
    ops.one(Op::Div);
    let p0 = k * aa;

    let mut roots = [f64::NAN; 2];
    if k1.abs() < 1e-12 {
        if k2 != 0.0 {
            roots[0] = -k3 / k2;
            ops.one(Op::Div);
        }
    } else {
        let disc = k2 * k2 - 4.0 * k1 * k3;
        ops.add(Op::Mul, 3);
        if disc >= 0.0 {
            let sq = disc.sqrt();
            ops.one(Op::Sqrt);
            let q = -0.5 * (k2 + k2.signum() * sq);
            if q != 0.0 {
                roots = [q / k1, k3 / q];
                ops.add(Op::Div, 2);
            } else {
                roots = [0.0, 0.0];
            }
        }
    }
    roots
        .into_iter()
        .filter(|r| r.is_finite() && *r > 0.0 && (r - p0).abs() > 1e-7 * p0)
        .fold(None, |acc: Option<f64>, r| {
            Some(acc.map_or(r, |v| v.min(r)))
        })
        .unwrap_or(0.0)
}

/// Approximated `R2m` with `g(k_rd/P)` replaced by the rational form.
pub fn approx_r2m(
    k_sd: f64,
    k_rd: f64,
    ps: f64,
    pm: f64,
    beta: f64,
    coeffs: &RationalCoeffs,
) -> f64 {
    let minus = LOG2_E * beta;
    if pm <= 0.0 {
        return minus;
    }
    let x = k_rd / pm;
    minus + LOG2_E * (coeffs.eval(x) - beta) / (1.0 - ps * k_rd / (pm * k_sd))
}
