//! Measurement synthesis and interaction graphs.
//!
//! Internal measurements are GNSS-like absolute fixes with isotropic Gaussian
//! noise. External measurements are range and bearing of a neighbor, available
//! only across measurement-domain edges. The communication domain is an
//! independent graph with a longer radius and random per-pair link failures.

mod episode;
pub mod io;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point2};

pub use episode::{make_episode, Episode, EpisodeStep};

/// Pairs closer than this cannot range or bear on each other.
pub const COINCIDENT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BearingFrame {
    /// Angle of `pos_B - pos_A` in the global frame.
    #[default]
    Global,
    /// Global bearing minus the observer's heading.
    EgoHeading,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Per-axis std of the internal position fix, meters.
    pub sigma_gnss: f64,
    pub sigma_range: f64,
    /// Radians.
    pub sigma_bearing: f64,
    pub rho_meas: f64,
    pub rho_comm: f64,
    /// Per-pair, per-step communication link failure probability.
    pub p_fail: f64,
    #[serde(default)]
    pub bearing_frame: BearingFrame,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_gnss: 10.0,
            sigma_range: 3.0,
            sigma_bearing: 1f64.to_radians(),
            rho_meas: 500.0,
            rho_comm: 1000.0,
            p_fail: 0.1,
            bearing_frame: BearingFrame::Global,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            ("sigma_gnss", self.sigma_gnss),
            ("sigma_range", self.sigma_range),
            ("sigma_bearing", self.sigma_bearing),
            ("rho_meas", self.rho_meas),
            ("rho_comm", self.rho_comm),
        ];
        for (name, v) in vals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.p_fail) {
            return Err(Error::InvalidArgument(format!("p_fail must lie in [0, 1], got {}", self.p_fail)));
        }
        Ok(())
    }

    /// The same configuration with every noise source switched off.
    pub fn noiseless(&self) -> Self {
        Self { sigma_gnss: 0.0, sigma_range: 0.0, sigma_bearing: 0.0, ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InternalMeasurement {
    pub vehicle: usize,
    pub t: usize,
    pub pos_meas: Point2,
}

/// Range and bearing of `subject` as sensed by `observer`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalMeasurement {
    pub observer: usize,
    pub subject: usize,
    pub t: usize,
    pub range_meas: f64,
    /// Radians in (-pi, pi].
    pub bearing_meas: f64,
}

fn gaussian<R: Rng>(std: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    std * z
}

pub fn sense_internal<R: Rng>(vehicle: usize, t: usize, true_pos: Point2, cfg: &NoiseConfig, rng: &mut R) -> InternalMeasurement {
    let nx = gaussian(cfg.sigma_gnss, rng);
    let ny = gaussian(cfg.sigma_gnss, rng);
    InternalMeasurement { vehicle, t, pos_meas: true_pos + Point2::new(nx, ny) }
}

/// Noisy global-frame range and bearing from `pos_a` to `pos_b`.
pub fn sense_external<R: Rng>(pos_a: Point2, pos_b: Point2, cfg: &NoiseConfig, rng: &mut R) -> Result<(f64, f64)> {
    let d = pos_b - pos_a;
    let range = d.norm();
    if range <= COINCIDENT_EPS {
        return Err(Error::InvalidArgument(format!(
            "external measurement between coincident positions ({}, {})",
            pos_a.x, pos_a.y
        )));
    }
    let n_r = gaussian(cfg.sigma_range, rng);
    let n_b = gaussian(cfg.sigma_bearing, rng);
    Ok(((range + n_r).max(0.0), wrap_angle(d.y.atan2(d.x) + n_b)))
}

/// Network input encoding: `(range / rho_meas, cos bearing, sin bearing)`.
pub fn encode_external(m: &ExternalMeasurement, cfg: &NoiseConfig) -> [f64; 3] {
    encode_external_scaled(m, if cfg.rho_meas > 0.0 { cfg.rho_meas } else { 1.0 })
}

/// [`encode_external`] with an explicit range normalizer.
pub fn encode_external_scaled(m: &ExternalMeasurement, range_scale: f64) -> [f64; 3] {
    [m.range_meas / range_scale, m.bearing_meas.cos(), m.bearing_meas.sin()]
}

/// Dense symmetric adjacency with an empty diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    bits: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self { n, bits: vec![false; n * n] }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = Self::empty(n);
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::InvalidArgument(format!("invalid edge ({a}, {b}) for {n} vehicles")));
            }
            adj.set(a, b, true);
        }
        Ok(adj)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, a: usize, b: usize) -> bool {
        self.bits[a * self.n + b]
    }

    pub fn set(&mut self, a: usize, b: usize, on: bool) {
        debug_assert!(a != b || !on);
        self.bits[a * self.n + b] = on;
        self.bits[b * self.n + a] = on;
    }

    /// Unordered edges `(a, b)` with `a < b`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.n {
            for b in a + 1..self.n {
                if self.get(a, b) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Neighbors of `a` in ascending order.
    pub fn neighbors(&self, a: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&b| self.get(a, b))
    }

    pub fn edge_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count() / 2
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|a| !self.get(a, a) && (0..self.n).all(|b| self.get(a, b) == self.get(b, a)))
    }
}

/// Measurement- and communication-domain graphs of one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainGraphs {
    pub t: usize,
    pub meas: Adjacency,
    pub comm: Adjacency,
}

impl DomainGraphs {
    pub fn empty(t: usize, n: usize) -> Self {
        Self { t, meas: Adjacency::empty(n), comm: Adjacency::empty(n) }
    }
}

pub(crate) fn in_meas_range(d: f64, cfg: &NoiseConfig) -> bool {
    cfg.rho_meas > 0.0 && d > COINCIDENT_EPS && d <= cfg.rho_meas
}

pub(crate) fn in_comm_range(d: f64, rho_comm: f64) -> bool {
    rho_comm > 0.0 && d <= rho_comm
}

/// Communication edges within `rho_comm`, each surviving with probability
/// `1 - p_fail`. One Bernoulli draw is consumed per unordered pair whether or
/// not the pair is in range, so graphs built at different radii from the same
/// stream are nested.
pub fn build_comm_graph<R: Rng>(positions: &[Point2], rho_comm: f64, p_fail: f64, rng: &mut R) -> Adjacency {
    let n = positions.len();
    let mut comm = Adjacency::empty(n);
    for a in 0..n {
        for b in a + 1..n {
            let survives = rng.random::<f64>() >= p_fail;
            if survives && in_comm_range(positions[a].dist(positions[b]), rho_comm) {
                comm.set(a, b, true);
            }
        }
    }
    comm
}

pub fn build_meas_graph(positions: &[Point2], cfg: &NoiseConfig) -> Adjacency {
    let n = positions.len();
    let mut meas = Adjacency::empty(n);
    for a in 0..n {
        for b in a + 1..n {
            if in_meas_range(positions[a].dist(positions[b]), cfg) {
                meas.set(a, b, true);
            }
        }
    }
    meas
}

/// Graphs over `positions` at timestep `t`; `rng` drives link failures only.
pub fn build_domain_graphs<R: Rng>(t: usize, positions: &[Point2], cfg: &NoiseConfig, rng: &mut R) -> Result<DomainGraphs> {
    if positions.is_empty() {
        return Err(Error::InvalidArgument("domain graphs need at least one vehicle".into()));
    }
    Ok(DomainGraphs {
        t,
        meas: build_meas_graph(positions, cfg),
        comm: build_comm_graph(positions, cfg.rho_comm, cfg.p_fail, rng),
    })
}
