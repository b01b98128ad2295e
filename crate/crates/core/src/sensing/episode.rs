use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point2};
use crate::rng;
use crate::world::TraceSet;

use super::{
    build_comm_graph, build_meas_graph, sense_external, sense_internal, BearingFrame, DomainGraphs,
    ExternalMeasurement, InternalMeasurement, NoiseConfig,
};

const MAX_GROUP_DRAWS: usize = 2000;

/// Everything observed (and the ground truth) at one timestep of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStep {
    pub t: usize,
    pub truth: Vec<Point2>,
    /// Internal position fix of every vehicle.
    pub internal: Vec<Point2>,
    /// Sorted by `(observer, subject)`; one entry per directed measurement edge.
    pub external: Vec<ExternalMeasurement>,
    pub graphs: DomainGraphs,
}

impl EpisodeStep {
    /// `table[a * n + b]` is the index into `external` of `a`'s measurement of `b`.
    pub fn external_table(&self) -> Vec<Option<usize>> {
        let n = self.truth.len();
        let mut table = vec![None; n * n];
        for (k, m) in self.external.iter().enumerate() {
            table[m.observer * n + m.subject] = Some(k);
        }
        table
    }

    pub fn internal_measurements(&self) -> impl Iterator<Item = InternalMeasurement> + '_ {
        self.internal
            .iter()
            .enumerate()
            .map(move |(vehicle, &pos_meas)| InternalMeasurement { vehicle, t: self.t, pos_meas })
    }
}

/// One vehicle group observed over a window of consecutive timesteps.
///
/// Vehicles are indexed locally `0..n`; index 0 is the focal vehicle and
/// `vehicle_ids` maps back to trace ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub vehicle_ids: Vec<u32>,
    /// First trace timestep of the window.
    pub start: usize,
    pub dt: f64,
    pub steps: Vec<EpisodeStep>,
}

impl Episode {
    pub fn n_vehicles(&self) -> usize {
        self.vehicle_ids.len()
    }

    pub fn window(&self) -> usize {
        self.steps.len()
    }

    pub fn internal_count(&self) -> usize {
        self.steps.iter().map(|s| s.internal.len()).sum()
    }

    pub fn external_count(&self) -> usize {
        self.steps.iter().map(|s| s.external.len()).sum()
    }

    /// Rebuilds every communication graph at a new radius, replaying this
    /// episode's link-failure stream. Measurements are untouched.
    pub fn with_comm_range(&self, rho_comm: f64, p_fail: f64) -> Episode {
        let mut comm_rng = rng::stream(self.seed, "comm", 0);
        let mut out = self.clone();
        for step in &mut out.steps {
            step.graphs.comm = build_comm_graph(&step.truth, rho_comm, p_fail, &mut comm_rng);
        }
        out
    }

    /// The same episode with every communication edge removed.
    pub fn without_comm(&self) -> Episode {
        let mut out = self.clone();
        for step in &mut out.steps {
            step.graphs.comm = super::Adjacency::empty(step.truth.len());
        }
        out
    }

    /// Relabels vehicles so that old vehicle `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Episode> {
        let n = self.n_vehicles();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument("not a permutation of the episode's vehicles".into()));
        }
        let reorder = |v: &[Point2]| {
            let mut out = vec![Point2::ZERO; n];
            for (i, &p) in v.iter().enumerate() {
                out[perm[i]] = p;
            }
            out
        };
        let mut vehicle_ids = vec![0; n];
        for (i, &id) in self.vehicle_ids.iter().enumerate() {
            vehicle_ids[perm[i]] = id;
        }
        let steps = self
            .steps
            .iter()
            .map(|s| {
                let mut external: Vec<ExternalMeasurement> = s
                    .external
                    .iter()
                    .map(|m| ExternalMeasurement { observer: perm[m.observer], subject: perm[m.subject], ..*m })
                    .collect();
                external.sort_by_key(|m| (m.observer, m.subject));
                let relabel = |adj: &super::Adjacency| {
                    let mut out = super::Adjacency::empty(n);
                    for (a, b) in adj.edges() {
                        out.set(perm[a], perm[b], true);
                    }
                    out
                };
                EpisodeStep {
                    t: s.t,
                    truth: reorder(&s.truth),
                    internal: reorder(&s.internal),
                    external,
                    graphs: DomainGraphs { t: s.t, meas: relabel(&s.graphs.meas), comm: relabel(&s.graphs.comm) },
                }
            })
            .collect();
        Ok(Episode { seed: self.seed, vehicle_ids, start: self.start, dt: self.dt, steps })
    }

    /// Checks the structural invariants an estimator relies on.
    pub fn validate(&self, cfg: &NoiseConfig) -> Result<()> {
        let n = self.n_vehicles();
        let bad = |msg: String| Err(Error::InvalidArgument(format!("episode {}: {msg}", self.seed)));
        if n == 0 || self.steps.is_empty() {
            return bad("empty episode".into());
        }
        for (k, s) in self.steps.iter().enumerate() {
            if s.t != k {
                return bad(format!("step {k} is labelled t={}", s.t));
            }
            if s.truth.len() != n || s.internal.len() != n || s.graphs.meas.len() != n || s.graphs.comm.len() != n {
                return bad(format!("step {k} has inconsistent vehicle counts"));
            }
            if !s.graphs.meas.is_symmetric() || !s.graphs.comm.is_symmetric() {
                return bad(format!("step {k} has an asymmetric graph"));
            }
            if s.truth.iter().chain(&s.internal).any(|p| !p.is_finite()) {
                return bad(format!("step {k} has non-finite positions"));
            }
            for (a, b) in s.graphs.meas.edges() {
                if s.truth[a].dist(s.truth[b]) > cfg.rho_meas + 1e-9 {
                    return bad(format!("step {k}: measurement edge ({a}, {b}) beyond rho_meas"));
                }
            }
            let mut prev: Option<(usize, usize)> = None;
            for m in &s.external {
                let key = (m.observer, m.subject);
                if m.observer >= n || m.subject >= n || m.observer == m.subject {
                    return bad(format!("step {k}: invalid external pair {key:?}"));
                }
                if !s.graphs.meas.get(m.observer, m.subject) {
                    return bad(format!("step {k}: external {key:?} without a measurement edge"));
                }
                if prev.is_some_and(|p| p >= key) {
                    return bad(format!("step {k}: external measurements not sorted"));
                }
                if !(m.range_meas >= 0.0) || !(m.bearing_meas > -std::f64::consts::PI && m.bearing_meas <= std::f64::consts::PI) {
                    return bad(format!("step {k}: external {key:?} out of range"));
                }
                prev = Some(key);
            }
            if s.external.len() != 2 * s.graphs.meas.edge_count() {
                return bad(format!("step {k}: missing external measurements"));
            }
        }
        Ok(())
    }
}

/// Samples a vehicle group and synthesizes `window` steps of measurements.
///
/// A focal vehicle and window start are drawn until at least `group_size - 1`
/// other vehicles lie within `rho_meas` of the focal vehicle at the window
/// start; the group is the focal vehicle plus its nearest neighbors then.
pub fn make_episode(traces: &TraceSet, group_size: usize, window: usize, cfg: &NoiseConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    if group_size == 0 || window == 0 {
        return Err(Error::InvalidArgument("group size and window must be positive".into()));
    }
    if traces.n_vehicles() < group_size {
        return Err(Error::InvalidArgument(format!(
            "{} vehicles cannot form a group of {group_size}",
            traces.n_vehicles()
        )));
    }
    if traces.duration() < window {
        return Err(Error::InvalidArgument(format!(
            "traces hold {} steps, window needs {window}",
            traces.duration()
        )));
    }

    let mut sel = rng::stream(seed, "group", 0);
    let mut chosen = None;
    for _ in 0..MAX_GROUP_DRAWS {
        let focal = sel.random_range(0..traces.n_vehicles());
        let start = sel.random_range(0..=traces.duration() - window);
        let origin = traces.position(focal, start);
        let mut near: Vec<(f64, usize)> = (0..traces.n_vehicles())
            .filter(|&v| v != focal)
            .map(|v| (origin.dist(traces.position(v, start)), v))
            .filter(|&(d, _)| d <= cfg.rho_meas)
            .collect();
        if near.len() + 1 >= group_size {
            near.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let mut members = vec![focal];
            members.extend(near.iter().take(group_size - 1).map(|&(_, v)| v));
            chosen = Some((members, start));
            break;
        }
    }
    let (members, start) = chosen.ok_or_else(|| {
        Error::Sampling(format!(
            "no vehicle had {} neighbors within {} m after {MAX_GROUP_DRAWS} draws; use denser traces or a smaller group",
            group_size - 1,
            cfg.rho_meas
        ))
    })?;

    let mut internal_rng = rng::stream(seed, "internal", 0);
    let mut external_rng = rng::stream(seed, "external", 0);
    let mut comm_rng = rng::stream(seed, "comm", 0);
    let n = members.len();
    let mut steps = Vec::with_capacity(window);
    for k in 0..window {
        let samples: Vec<_> = members.iter().map(|&v| traces.tracks[v].samples[start + k]).collect();
        let truth: Vec<Point2> = samples.iter().map(|s| s.pos).collect();
        let internal = (0..n)
            .map(|a| sense_internal(a, k, truth[a], cfg, &mut internal_rng).pos_meas)
            .collect();
        let meas = build_meas_graph(&truth, cfg);
        let comm = build_comm_graph(&truth, cfg.rho_comm, cfg.p_fail, &mut comm_rng);
        let mut external = Vec::new();
        for a in 0..n {
            for b in meas.neighbors(a) {
                let (range_meas, mut bearing_meas) = sense_external(truth[a], truth[b], cfg, &mut external_rng)?;
                if cfg.bearing_frame == BearingFrame::EgoHeading {
                    bearing_meas = wrap_angle(bearing_meas - samples[a].heading);
                }
                external.push(ExternalMeasurement { observer: a, subject: b, t: k, range_meas, bearing_meas });
            }
        }
        steps.push(EpisodeStep { t: k, truth, internal, external, graphs: DomainGraphs { t: k, meas, comm } });
    }
    Ok(Episode {
        seed,
        vehicle_ids: members.iter().map(|&v| traces.tracks[v].id).collect(),
        start,
        dt: traces.dt,
        steps,
    })
}
