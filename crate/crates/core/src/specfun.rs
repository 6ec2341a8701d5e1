//! Exponential integral, the product `g(x) = exp(x)·E1(x)`, and its
//! three-piece rational approximation `(a·x + b)/(c + x)`.
//!
//! ```
//! use dfrelay::specfun::{exp_e1, RationalTable};
//!
//! let g = exp_e1(1.0).unwrap();
//! assert!((g - 0.596_347_362_323_194).abs() < 1e-14);
//!
//! let table = RationalTable::refit();
//! let row = table.select(10f64.powf(0.5)).unwrap();
//! assert!((row.eval(3.0) - exp_e1(3.0).unwrap()).abs() < 0.02);
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{Op, Ops};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const SERIES_MAX_TERMS: usize = 200;
const CF_MAX_ITER: usize = 10_000;

fn check_domain(function: &'static str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            function,
            value: x,
            expected: "finite and > 0",
        })
    }
}

/// E1(x) = ∫₁^∞ e^{-xt}/t dt.
pub fn e1(x: f64) -> Result<f64> {
    check_domain("e1", x)?;
    Ok(if x < 1.0 {
        e1_series(x)
    } else {
        (-x).exp() * g_fraction(x)
    })
}

/// exp(x)·E1(x), evaluated without forming exp(x) for x ≥ 1.
pub fn exp_e1(x: f64) -> Result<f64> {
    check_domain("exp_e1", x)?;
    Ok(g(x))
}

/// Unchecked `exp_e1` for internal hot paths; callers guarantee `x > 0`.
#[inline]
pub(crate) fn g(x: f64) -> f64 {
    debug_assert!(x > 0.0, "g({x})");
    if x < 1.0 {
        x.exp() * e1_series(x)
    } else {
        g_fraction(x)
    }
}

/// `g` with the evaluation recorded as one exp and one E1 call.
#[inline]
pub(crate) fn g_counted<O: Ops>(x: f64, ops: &mut O) -> f64 {
    ops.one(Op::Exp);
    ops.one(Op::E1);
    g(x)
}

fn e1_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = 1.0;
    for k in 1..SERIES_MAX_TERMS {
        let kf = k as f64;
        term *= -x / kf;
        let contrib = term / kf;
        sum += contrib;
        if contrib.abs() < 1e-17 * sum.abs().max(1e-300) {
            break;
        }
    }
    -EULER_GAMMA - x.ln() - sum
}

/// Continued fraction for exp(x)·E1(x), modified Lentz; good for x ≥ 1.
fn g_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..CF_MAX_ITER {
        let an = -((i * i) as f64);
        b += 2.0;
        d = 1.0 / (an * d + b);
        c = b + an / c;
        let del = c * d;
        h *= del;
        if (del - 1.0).abs() < f64::EPSILON {
            break;
        }
    }
    h
}

/// Coefficients of `(a·x + b)/(c + x)` for one dB range of x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RationalCoeffs {
    pub range_lo_db: f64,
    pub range_hi_db: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl RationalCoeffs {
    pub fn new(a: f64, b: f64, c: f64, range_lo_db: f64, range_hi_db: f64) -> Result<Self> {
        let r = RationalCoeffs {
            range_lo_db,
            range_hi_db,
            a,
            b,
            c,
        };
        r.validate()?;
        Ok(r)
    }

    /// Coefficients not tied to a table range.
    pub fn unranged(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::new(a, b, c, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite() && self.c.is_finite()) {
            return Err(Error::Coefficients(format!("non-finite value in {self:?}")));
        }
        if self.c <= 0.0 {
            return Err(Error::Coefficients(format!("c = {} must be > 0", self.c)));
        }
        if self.range_lo_db.is_nan()
            || self.range_hi_db.is_nan()
            || self.range_lo_db >= self.range_hi_db
        {
            return Err(Error::Coefficients(format!(
                "range [{}, {}] dB is empty",
                self.range_lo_db, self.range_hi_db
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (self.a * x + self.b) / (self.c + x)
    }

    pub fn contains_db(&self, db: f64) -> bool {
        db >= self.range_lo_db && db < self.range_hi_db
    }
}

/// `(a·x + b)/(c + x)`.
pub fn rational_approx(x: f64, coeffs: &RationalCoeffs) -> Result<f64> {
    check_domain("rational_approx", x)?;
    coeffs.validate()?;
    Ok(coeffs.eval(x))
}

/// Picks the row whose range contains `10·log10(delta)`; values outside the
/// table clamp to the first or last row.
pub fn select_coeffs(delta: f64, table: &[RationalCoeffs]) -> Result<RationalCoeffs> {
    check_domain("select_coeffs", delta)?;
    let first = table.first().ok_or(Error::EmptyTable)?;
    let last = table[table.len() - 1];
    let db = 10.0 * delta.log10();
    if db < first.range_lo_db {
        return Ok(*first);
    }
    Ok(table
        .iter()
        .find(|r| r.contains_db(db))
        .copied()
        .unwrap_or(last))
}

/// Contiguous, ordered set of [`RationalCoeffs`] rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalTable {
    rows: Vec<RationalCoeffs>,
}

impl RationalTable {
    pub fn new(rows: Vec<RationalCoeffs>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyTable);
        }
        for r in &rows {
            r.validate()?;
        }
        for w in rows.windows(2) {
            if w[0].range_hi_db != w[1].range_lo_db {
                return Err(Error::Coefficients(format!(
                    "rows are not contiguous: [{}, {}] then [{}, {}]",
                    w[0].range_lo_db, w[0].range_hi_db, w[1].range_lo_db, w[1].range_hi_db
                )));
            }
        }
        Ok(RationalTable { rows })
    }

    /// The published constants with their published range labels.
    pub fn published() -> Self {
        RationalTable {
            rows: vec![
                RationalCoeffs {
                    range_lo_db: -15.0,
                    range_hi_db: 0.0,
                    a: 2.4989,
                    b: 0.0364,
                    c: 0.005416,
                },
                RationalCoeffs {
                    range_lo_db: 0.0,
                    range_hi_db: 15.0,
                    a: 0.3495,
                    b: 0.3698,
                    c: 0.0985,
                },
                RationalCoeffs {
                    range_lo_db: 15.0,
                    range_hi_db: 30.0,
                    a: 0.003246,
                    b: 0.9306,
                    c: 0.583,
                },
            ],
        }
    }

    /// Output of [`fit_coeffs`] with default settings and `n = 10⁴` on each
    /// range; regenerate with `dfrelay fit-table`.
    pub fn refit() -> Self {
        RationalTable {
            rows: vec![
                RationalCoeffs {
                    range_lo_db: -15.0,
                    range_hi_db: 0.0,
                    a: REFIT[0][0],
                    b: REFIT[0][1],
                    c: REFIT[0][2],
                },
                RationalCoeffs {
                    range_lo_db: 0.0,
                    range_hi_db: 15.0,
                    a: REFIT[1][0],
                    b: REFIT[1][1],
                    c: REFIT[1][2],
                },
                RationalCoeffs {
                    range_lo_db: 15.0,
                    range_hi_db: 30.0,
                    a: REFIT[2][0],
                    b: REFIT[2][1],
                    c: REFIT[2][2],
                },
            ],
        }
    }

    pub fn rows(&self) -> &[RationalCoeffs] {
        &self.rows
    }

    pub fn select(&self, delta: f64) -> Result<RationalCoeffs> {
        select_coeffs(delta, &self.rows)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<RationalCoeffs>, _>>()?;
        Self::new(rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

const REFIT: [[f64; 3]; 3] = [
    [0.3495357362450167, 0.36978538687500173, 0.09847208068152541],
    [0.003745122206597874, 0.9226319410774035, 0.5639677849589118],
    [8.55561788261491e-7, 0.9995837456259095, 0.9602946142847626],
];

/// Levenberg–Marquardt controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmSettings {
    pub initial: [f64; 3],
    pub lambda0: f64,
    pub factor: f64,
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        LmSettings {
            initial: [1.0, 1.0, 1.0],
            lambda0: 1e-3,
            factor: 10.0,
            max_iter: 500,
            rel_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitReport {
    pub coeffs: RationalCoeffs,
    /// Sum of squared errors S over the samples.
    pub residual: f64,
    /// √(S/n).
    pub rmse: f64,
    /// √(S²/n), the published variant.
    pub rmse_squared_form: f64,
    pub samples: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// `n` points uniformly spaced in dB over `[lo_db, hi_db]`, in linear scale.
pub fn db_grid(lo_db: f64, hi_db: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![10f64.powf(lo_db / 10.0)];
    }
    let step = (hi_db - lo_db) / (n - 1) as f64;
    (0..n)
        .map(|i| 10f64.powf((lo_db + step * i as f64) / 10.0))
        .collect()
}

/// Sum of squared errors of `coeffs` against exact `exp_e1` on the dB grid.
pub fn table_residual(coeffs: &RationalCoeffs, lo_db: f64, hi_db: f64, n: usize) -> f64 {
    db_grid(lo_db, hi_db, n)
        .into_iter()
        .map(|x| (coeffs.eval(x) - g(x)).powi(2))
        .sum()
}

fn check_range(lo_db: f64, hi_db: f64, n: usize) -> Result<()> {
    if !(lo_db.is_finite() && hi_db.is_finite() && lo_db < hi_db) {
        return Err(Error::Coefficients(format!(
            "fit range [{lo_db}, {hi_db}] dB is empty"
        )));
    }
    if n < 3 {
        return Err(Error::Coefficients(format!("need n >= 3 samples, got {n}")));
    }
    Ok(())
}

/// Least-squares fit of the rational form to `exp_e1` over a dB range.
pub fn fit_coeffs(lo_db: f64, hi_db: f64, n: usize) -> Result<FitReport> {
    fit_coeffs_with(lo_db, hi_db, n, &LmSettings::default())
}

pub fn fit_coeffs_with(
    lo_db: f64,
    hi_db: f64,
    n: usize,
    settings: &LmSettings,
) -> Result<FitReport> {
    check_range(lo_db, hi_db, n)?;
    let xs = db_grid(lo_db, hi_db, n);
    let ys: Vec<f64> = xs.iter().map(|&x| g(x)).collect();
    let mut report = fit_rational(&xs, &ys, settings)?;
    report.coeffs.range_lo_db = lo_db;
    report.coeffs.range_hi_db = hi_db;
    Ok(report)
}

/// Levenberg–Marquardt on `(a·x + b)/(c + x)` with Marquardt diagonal scaling.
/// Steps that would make `c + x` non-positive on the samples are rejected.
pub fn fit_rational(xs: &[f64], ys: &[f64], settings: &LmSettings) -> Result<FitReport> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Coefficients(format!(
            "need matching samples (n >= 3), got {} x and {} y",
            xs.len(),
            ys.len()
        )));
    }
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let sse = |p: &[f64; 3]| -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(&x, &y)| ((p[0] * x + p[1]) / (p[2] + x) - y).powi(2))
            .sum()
    };
    let admissible =
        |p: &[f64; 3]| p.iter().all(|v| v.is_finite()) && p[2] > 0.0 && p[2] + x_min > 0.0;

    let mut p = settings.initial;
    if !admissible(&p) {
        return Err(Error::Coefficients(format!(
            "initial guess {p:?} is not admissible"
        )));
    }
    let mut s = sse(&p);
    let mut lambda = settings.lambda0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < settings.max_iter {
        iterations += 1;
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&x, &y) in xs.iter().zip(ys) {
            let den = p[2] + x;
            let f = (p[0] * x + p[1]) / den;
            let j = [x / den, 1.0 / den, -f / den];
            let r = f - y;
            for i in 0..3 {
                jtr[i] += j[i] * r;
                for k in 0..3 {
                    jtj[i][k] += j[i] * j[k];
                }
            }
        }
        if jtr.iter().all(|v| *v == 0.0) || s == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while lambda < 1e20 {
            let mut m = jtj;
            for (i, row) in m.iter_mut().enumerate() {
                row[i] += lambda * jtj[i][i].max(f64::MIN_POSITIVE);
            }
            let rhs = [-jtr[0], -jtr[1], -jtr[2]];
            let Some(delta) = solve3(m, rhs) else {
                lambda *= settings.factor;
                continue;
            };
            let trial = [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]];
            let s_trial = if admissible(&trial) {
                sse(&trial)
            } else {
                f64::INFINITY
            };
            if s_trial < s {
                let rel = (s - s_trial) / s;
                p = trial;
                s = s_trial;
                lambda /= settings.factor;
                accepted = true;
                if rel < settings.rel_tol {
                    converged = true;
                }
                break;
            }
            lambda *= settings.factor;
        }
        if !accepted {
            // No descent direction left at working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }

    let n = xs.len() as f64;
    Ok(FitReport {
        coeffs: RationalCoeffs {
            range_lo_db: f64::NEG_INFINITY,
            range_hi_db: f64::INFINITY,
            a: p[0],
            b: p[1],
            c: p[2],
        },
        residual: s,
        rmse: (s / n).sqrt(),
        rmse_squared_form: (s * s / n).sqrt(),
        samples: xs.len(),
        iterations,
        converged,
    })
}

/// Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col] == 0.0 || !m[piv][col].is_finite() {
            return None;
        }
        m.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            let pivot = m[col];
            for (v, p) in m[row].iter_mut().zip(pivot).skip(col) {
                *v -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in row + 1..3 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
