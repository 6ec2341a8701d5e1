//! Scenario description: geometry, path-loss constants, fading draws.
//!
//! Coordinates are planar. Sources sit uniformly in a disc of radius 0.5
//! centred on the origin, the destination lies on the positive x axis and
//! the relay somewhere on the segment between them.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic per-link magnitude used wherever mean channels stand in
/// for fading: π/(2√2).
pub const MEAN_FIELD_GAIN: f64 = PI / (2.0 * std::f64::consts::SQRT_2);

/// True mean of a unit-power Rayleigh magnitude, √π/2. Exposed for
/// comparison; the allocators use [`MEAN_FIELD_GAIN`].
pub const RAYLEIGH_MEAN: f64 = 0.886_226_925_452_758;

pub const SOURCE_DISC_RADIUS: f64 = 0.5;

pub fn mean_field_gains() -> f64 {
    MEAN_FIELD_GAIN
}

fn default_bandwidth() -> f64 {
    1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserGeometry {
    pub d_sr: f64,
    pub d_sd: f64,
    pub d_rd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "Ps")]
    pub ps: f64,
    #[serde(rename = "Pr")]
    pub pr: f64,
    pub alpha: f64,
    #[serde(rename = "Nr")]
    pub nr: f64,
    #[serde(rename = "Nd")]
    pub nd: f64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_hz: f64,
    pub users: Vec<UserGeometry>,
}

fn positive(field: impl Into<String>, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config {
            field: field.into(),
            reason: format!("must be finite and > 0, got {v}"),
        })
    }
}

impl NetworkConfig {
    /// Config with the usual normalisation `α = 2`, `N_r = N_d = 1`.
    pub fn normalized(ps: f64, pr: f64, users: Vec<UserGeometry>) -> Result<Self> {
        let cfg = NetworkConfig {
            m: users.len(),
            ps,
            pr,
            alpha: 2.0,
            nr: 1.0,
            nd: 1.0,
            bandwidth_hz: default_bandwidth(),
            users,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Config {
                field: "M".into(),
                reason: format!("must be >= 1, got {}", self.m),
            });
        }
        positive("Ps", self.ps)?;
        positive("Pr", self.pr)?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config {
                field: "alpha".into(),
                reason: format!("must be finite and >= 0, got {}", self.alpha),
            });
        }
        positive("Nr", self.nr)?;
        positive("Nd", self.nd)?;
        positive("bandwidth_hz", self.bandwidth_hz)?;
        if self.users.len() != self.m {
            return Err(Error::Config {
                field: "users".into(),
                reason: format!("has {} entries but M = {}", self.users.len(), self.m),
            });
        }
        for (i, u) in self.users.iter().enumerate() {
            positive(format!("users[{i}].d_sr"), u.d_sr)?;
            positive(format!("users[{i}].d_sd"), u.d_sd)?;
            positive(format!("users[{i}].d_rd"), u.d_rd)?;
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn path_coeffs(&self, user: usize) -> Result<PathCoeffs> {
        let u = self.users.get(user).ok_or(Error::UserIndex {
            index: user,
            m: self.users.len(),
        })?;
        Ok(PathCoeffs::from_geometry(u, self.alpha, self.nr, self.nd))
    }

    pub fn all_path_coeffs(&self) -> Vec<PathCoeffs> {
        self.users
            .iter()
            .map(|u| PathCoeffs::from_geometry(u, self.alpha, self.nr, self.nd))
            .collect()
    }
}

/// Per-user propagation constants `k = d^α · N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathCoeffs {
    pub k_sr: f64,
    pub k_sd: f64,
    pub k_rd: f64,
}

impl PathCoeffs {
    pub fn from_geometry(u: &UserGeometry, alpha: f64, nr: f64, nd: f64) -> Self {
        PathCoeffs {
            k_sr: u.d_sr.powf(alpha) * nr,
            k_sd: u.d_sd.powf(alpha) * nd,
            k_rd: u.d_rd.powf(alpha) * nd,
        }
    }
}

pub fn path_coeffs(cfg: &NetworkConfig, user: usize) -> Result<PathCoeffs> {
    cfg.path_coeffs(user)
}

/// Generator for one `(seed, stream)` pair. Streams keep trials and
/// purposes independent of scheduling order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Source positions in the disc of radius 0.5 around the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceLayout {
    pub points: Vec<(f64, f64)>,
}

impl SourceLayout {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Self {
        let points = (0..m)
            .map(|_| {
                // 1 - U lies in (0, 1], so no source lands exactly on the centre.
                let r = SOURCE_DISC_RADIUS * (1.0 - rng.random::<f64>()).sqrt();
                let th = 2.0 * PI * rng.random::<f64>();
                (r * th.cos(), r * th.sin())
            })
            .collect();
        SourceLayout { points }
    }

    /// Distances with the relay at `(relay_x, 0)` and destination at `(dest_x, 0)`.
    pub fn geometry(&self, relay_x: f64, dest_x: f64) -> Vec<UserGeometry> {
        self.points
            .iter()
            .map(|&(x, y)| UserGeometry {
                d_sr: (x - relay_x).hypot(y),
                d_sd: (x - dest_x).hypot(y),
                d_rd: (dest_x - relay_x).abs(),
            })
            .collect()
    }
}

/// `M` sources in the disc around the relay, destination `relay_to_dest`
/// away on the axis.
pub fn sample_topology(seed: u64, m: usize, relay_to_dest: f64) -> Vec<UserGeometry> {
    let mut rng = stream_rng(seed, 0);
    SourceLayout::sample(&mut rng, m).geometry(0.0, relay_to_dest)
}

/// One Rayleigh draw per link per user.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingDraw {
    pub h_sr: Vec<Complex64>,
    pub h_sd: Vec<Complex64>,
    pub h_rd: Vec<Complex64>,
}

#[inline]
pub fn rayleigh<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

impl FadingDraw {
    pub fn zeros(m: usize) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); m];
        FadingDraw {
            h_sr: z.clone(),
            h_sd: z.clone(),
            h_rd: z,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Self {
        let mut d = Self::zeros(m);
        d.resample(rng);
        d
    }

    pub fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for i in 0..self.h_sr.len() {
            self.h_sr[i] = rayleigh(rng);
            self.h_sd[i] = rayleigh(rng);
            self.h_rd[i] = rayleigh(rng);
        }
    }

    pub fn len(&self) -> usize {
        self.h_sr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h_sr.is_empty()
    }
}

pub fn sample_fading(seed: u64, m: usize) -> FadingDraw {
    FadingDraw::sample(&mut stream_rng(seed, 1), m)
}

/// Squared link magnitudes entering the combined gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkPower {
    pub sd: f64,
    pub rd: f64,
}

impl LinkPower {
    pub fn mean_field() -> Self {
        let p = MEAN_FIELD_GAIN * MEAN_FIELD_GAIN;
        LinkPower { sd: p, rd: p }
    }

    pub fn from_draw(draw: &FadingDraw, user: usize) -> Self {
        LinkPower {
            sd: draw.h_sd[user].norm_sqr(),
            rd: draw.h_rd[user].norm_sqr(),
        }
    }
}

/// `G = d_sd^α|h_rd|² / (d_rd^α (P_s|h_sd|² + N_d d_sd^α))`.
pub fn combined_gain_raw(
    d_sd: f64,
    d_rd: f64,
    alpha: f64,
    ps: f64,
    nd: f64,
    link: LinkPower,
) -> f64 {
    let sd_a = d_sd.powf(alpha);
    sd_a * link.rd / (d_rd.powf(alpha) * (ps * link.sd + nd * sd_a))
}

pub fn combined_gain(cfg: &NetworkConfig, user: usize, link: LinkPower) -> Result<f64> {
    let u = cfg.users.get(user).ok_or(Error::UserIndex {
        index: user,
        m: cfg.users.len(),
    })?;
    Ok(combined_gain_raw(
        u.d_sd, u.d_rd, cfg.alpha, cfg.ps, cfg.nd, link,
    ))
}

/// Same gain written with the path constants: `k_sd|h_rd|² / (k_rd (P_s|h_sd|² + k_sd))`.
#[inline]
pub(crate) fn gain_from_coeffs(k: &PathCoeffs, ps: f64, link: LinkPower) -> f64 {
    k.k_sd * link.rd / (k.k_rd * (ps * link.sd + k.k_sd))
}
