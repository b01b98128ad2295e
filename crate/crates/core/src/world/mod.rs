//! Road networks and synthetic vehicle mobility.
//!
//! Vehicles drive on a Manhattan grid along shortest-time routes between
//! random junctions, re-routing to a fresh destination on arrival. Traces are
//! sampled at a fixed timestep and can be exchanged as CSV (see [`io`]).

pub mod io;

use petgraph::algo::astar;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::rng;

pub use io::{load_traces, save_traces};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: usize,
    pub b: usize,
    /// Speed limit in m/s.
    pub speed_limit: f64,
}

/// Axis-aligned bounding box in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: Point2,
    pub max: Point2,
}

impl Extent {
    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        p.x >= self.min.x - tol
            && p.x <= self.max.x + tol
            && p.y >= self.min.y - tol
            && p.y <= self.max.y + tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    junctions: Vec<Point2>,
    segments: Vec<Segment>,
    extent: Extent,
}

impl RoadNetwork {
    /// Builds a network, checking segment indices, speeds and connectivity.
    pub fn new(junctions: Vec<Point2>, segments: Vec<Segment>) -> Result<Self> {
        if junctions.is_empty() {
            return Err(Error::InvalidArgument("road network has no junctions".into()));
        }
        for (i, s) in segments.iter().enumerate() {
            if s.a >= junctions.len() || s.b >= junctions.len() || s.a == s.b {
                return Err(Error::InvalidArgument(format!(
                    "segment {i} references invalid junctions ({}, {})",
                    s.a, s.b
                )));
            }
            if !(s.speed_limit > 0.0 && s.speed_limit.is_finite()) {
                return Err(Error::InvalidArgument(format!("segment {i} has non-positive speed limit")));
            }
        }
        let mut min = junctions[0];
        let mut max = junctions[0];
        for p in &junctions {
            if !p.is_finite() {
                return Err(Error::InvalidArgument("junction coordinates must be finite".into()));
            }
            min = Point2::new(min.x.min(p.x), min.y.min(p.y));
            max = Point2::new(max.x.max(p.x), max.y.max(p.y));
        }
        let net = Self { junctions, segments, extent: Extent { min, max } };
        if !net.is_connected() {
            return Err(Error::InvalidArgument("junction graph is not connected".into()));
        }
        Ok(net)
    }

    pub fn junctions(&self) -> &[Point2] {
        &self.junctions
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn max_speed(&self) -> f64 {
        self.segments.iter().map(|s| s.speed_limit).fold(0.0, f64::max)
    }

    pub fn segment_length(&self, s: &Segment) -> f64 {
        self.junctions[s.a].dist(self.junctions[s.b])
    }

    /// Distance from `p` to the closest point of any segment.
    pub fn distance_to_network(&self, p: Point2) -> f64 {
        self.segments
            .iter()
            .map(|s| crate::geometry::point_segment_distance(p, self.junctions[s.a], self.junctions[s.b]))
            .fold(f64::INFINITY, f64::min)
    }

    fn is_connected(&self) -> bool {
        let n = self.junctions.len();
        let mut adj = vec![Vec::new(); n];
        for s in &self.segments {
            adj[s.a].push(s.b);
            adj[s.b].push(s.a);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// Travel-time graph; edge weights are seconds at the speed limit.
    fn travel_graph(&self) -> UnGraph<(), (usize, f64)> {
        let mut g = UnGraph::with_capacity(self.junctions.len(), self.segments.len());
        for _ in &self.junctions {
            g.add_node(());
        }
        for (i, s) in self.segments.iter().enumerate() {
            let t = self.segment_length(s) / s.speed_limit;
            g.add_edge(NodeIndex::new(s.a), NodeIndex::new(s.b), (i, t));
        }
        g
    }
}

/// Manhattan grid of `rows x cols` junctions spaced `spacing` meters apart.
///
/// Junction `(r, c)` has index `r * cols + c` and sits at `(c * spacing, r * spacing)`.
pub fn generate_grid_network(rows: usize, cols: usize, spacing: f64, speed_limit: f64) -> Result<RoadNetwork> {
    if rows < 2 || cols < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid needs at least 2 rows and 2 columns, got {rows}x{cols}"
        )));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidArgument("grid spacing must be positive".into()));
    }
    let mut junctions = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            junctions.push(Point2::new(c as f64 * spacing, r as f64 * spacing));
        }
    }
    let mut segments = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                segments.push(Segment { a: i, b: i + 1, speed_limit });
            }
            if r + 1 < rows {
                segments.push(Segment { a: i, b: i + cols, speed_limit });
            }
        }
    }
    RoadNetwork::new(junctions, segments)
}

/// One ground-truth sample of a vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub pos: Point2,
    /// Direction of motion in (-pi, pi].
    pub heading: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleTrack {
    pub id: u32,
    pub samples: Vec<TraceSample>,
}

/// Ground-truth trajectories sampled every `dt` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSet {
    pub dt: f64,
    pub tracks: Vec<VehicleTrack>,
}

impl TraceSet {
    pub fn new(dt: f64, tracks: Vec<VehicleTrack>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument("trace timestep must be positive".into()));
        }
        if let Some(first) = tracks.first() {
            let len = first.samples.len();
            if let Some(bad) = tracks.iter().find(|t| t.samples.len() != len) {
                return Err(Error::InvalidArgument(format!(
                    "vehicle {} has {} samples, expected {len}",
                    bad.id,
                    bad.samples.len()
                )));
            }
        }
        Ok(Self { dt, tracks })
    }

    pub fn n_vehicles(&self) -> usize {
        self.tracks.len()
    }

    /// Number of samples per vehicle.
    pub fn duration(&self) -> usize {
        self.tracks.first().map_or(0, |t| t.samples.len())
    }

    pub fn position(&self, vehicle: usize, t: usize) -> Point2 {
        self.tracks[vehicle].samples[t].pos
    }
}

/// A vehicle's progress along its current route.
struct Driver {
    speed_factor: f64,
    /// Junction sequence of the current route, starting at the last junction passed.
    route: Vec<usize>,
    /// Index into `route` of the segment start.
    leg: usize,
    /// Meters already driven along the current leg.
    offset: f64,
}

struct Router<'a> {
    net: &'a RoadNetwork,
    graph: UnGraph<(), (usize, f64)>,
    /// Segment index for each junction pair, keyed by the smaller endpoint.
    seg_lookup: std::collections::HashMap<(usize, usize), usize>,
}

impl<'a> Router<'a> {
    fn new(net: &'a RoadNetwork) -> Self {
        let seg_lookup = net
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.a.min(s.b), s.a.max(s.b)), i))
            .collect();
        Self { net, graph: net.travel_graph(), seg_lookup }
    }

    fn route(&self, from: usize, to: usize) -> Vec<usize> {
        let goal = NodeIndex::new(to);
        let (_, path) = astar(&self.graph, NodeIndex::new(from), |n| n == goal, |e| e.weight().1, |_| 0.0)
            .expect("road network is connected");
        path.into_iter().map(NodeIndex::index).collect()
    }

    fn segment(&self, a: usize, b: usize) -> &Segment {
        &self.net.segments[self.seg_lookup[&(a.min(b), a.max(b))]]
    }

    fn pick_route<R: Rng>(&self, from: usize, rng: &mut R) -> Vec<usize> {
        let n = self.net.junctions.len();
        let mut to = rng.random_range(0..n - 1);
        if to >= from {
            to += 1;
        }
        self.route(from, to)
    }
}

impl Driver {
    fn position(&self, net: &RoadNetwork) -> Point2 {
        let a = net.junctions[self.route[self.leg]];
        let b = net.junctions[self.route[self.leg + 1]];
        let len = a.dist(b);
        a.lerp(b, if len > 0.0 { self.offset / len } else { 0.0 })
    }

    fn direction(&self, net: &RoadNetwork) -> f64 {
        let a = net.junctions[self.route[self.leg]];
        let b = net.junctions[self.route[self.leg + 1]];
        (b - a).angle()
    }

    /// Drives for `dt` seconds, re-routing at each destination.
    fn advance<R: Rng>(&mut self, router: &Router<'_>, mut dt: f64, rng: &mut R) {
        let net = router.net;
        while dt > 0.0 {
            let (a, b) = (self.route[self.leg], self.route[self.leg + 1]);
            let seg = router.segment(a, b);
            let v = seg.speed_limit * self.speed_factor;
            let len = net.segment_length(seg);
            let remaining = (len - self.offset) / v;
            if remaining > dt {
                self.offset += v * dt;
                return;
            }
            dt -= remaining;
            self.offset = 0.0;
            self.leg += 1;
            if self.leg + 1 >= self.route.len() {
                self.route = router.pick_route(b, rng);
                self.leg = 0;
            }
        }
    }
}

/// Simulates `n_vehicles` drivers for `duration_s` seconds, sampled every `dt`.
///
/// Each vehicle spawns at a uniformly random junction, with a speed factor drawn
/// uniformly in [0.8, 1.0] applied to every segment's speed limit. The result
/// holds `floor(duration_s / dt) + 1` samples per vehicle.
pub fn simulate_traces(net: &RoadNetwork, n_vehicles: usize, duration_s: f64, dt: f64, seed: u64) -> Result<TraceSet> {
    if n_vehicles == 0 {
        return Err(Error::InvalidArgument("at least one vehicle is required".into()));
    }
    if !(dt > 0.0) || !(duration_s >= dt) {
        return Err(Error::InvalidArgument(format!(
            "need duration_s >= dt > 0, got duration {duration_s}, dt {dt}"
        )));
    }
    if net.junctions.len() < 2 {
        return Err(Error::InvalidArgument("mobility needs at least two junctions".into()));
    }
    let router = Router::new(net);
    let n_steps = (duration_s / dt + 1e-9).floor() as usize;
    let mut tracks = Vec::with_capacity(n_vehicles);
    for v in 0..n_vehicles {
        let mut rng = rng::stream(seed, "mobility", v as u64);
        let speed_factor = rng.random_range(0.8..=1.0);
        let start = rng.random_range(0..net.junctions.len());
        let route = router.pick_route(start, &mut rng);
        let mut driver = Driver { speed_factor, route, leg: 0, offset: 0.0 };

        let mut samples = Vec::with_capacity(n_steps + 1);
        let mut prev = driver.position(net);
        let mut heading = driver.direction(net);
        samples.push(TraceSample { pos: prev, heading });
        for _ in 0..n_steps {
            driver.advance(&router, dt, &mut rng);
            let pos = driver.position(net);
            let disp = pos - prev;
            if disp.norm() > 1e-9 {
                heading = disp.angle();
            }
            samples.push(TraceSample { pos, heading });
            prev = pos;
        }
        tracks.push(VehicleTrack { id: v as u32, samples });
    }
    TraceSet::new(dt, tracks)
}

/// Randomly partitions vehicles into two disjoint sets of sizes
/// `round(n * train_fraction)` and the remainder.
pub fn split_vehicles(traces: &TraceSet, train_fraction: f64, seed: u64) -> Result<(TraceSet, TraceSet)> {
    let n = traces.n_vehicles();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cannot split {n} vehicle(s)")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split", 0));
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| TraceSet {
        dt: traces.dt,
        tracks: idx.iter().map(|&i| traces.tracks[i].clone()).collect(),
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::wrap_angle;

    #[test]
    fn minimal_grid() {
        let net = generate_grid_network(2, 2, 100.0, 14.0).unwrap();
        assert_eq!(net.junctions().len(), 4);
        assert_eq!(net.segments().len(), 4);
        assert_eq!(net.extent().width(), 100.0);
        assert_eq!(net.extent().height(), 100.0);
    }

    #[test]
    fn grid_segment_count_matches_brute_force() {
        let (rows, cols, spacing) = (4, 5, 200.0);
        let net = generate_grid_network(rows, cols, spacing, 14.0).unwrap();
        assert_eq!(net.junctions().len(), 20);
        // every junction pair exactly one spacing apart is a segment
        let js = net.junctions();
        let mut pairs = 0;
        for i in 0..js.len() {
            for j in i + 1..js.len() {
                if (js[i].dist(js[j]) - spacing).abs() < 1e-9 {
                    pairs += 1;
                    assert!(net
                        .segments()
                        .iter()
                        .any(|s| (s.a, s.b) == (i, j) || (s.a, s.b) == (j, i)));
                }
            }
        }
        assert_eq!(pairs, 31);
        assert_eq!(net.segments().len(), 31);
        assert_eq!(net.extent().width(), 800.0);
        assert_eq!(net.extent().height(), 600.0);
    }

    #[test]
    fn degenerate_grid_rejected() {
        assert!(generate_grid_network(1, 5, 100.0, 14.0).is_err());
        assert!(generate_grid_network(3, 1, 100.0, 14.0).is_err());
        assert!(generate_grid_network(3, 3, 0.0, 14.0).is_err());
    }

    #[test]
    fn disconnected_network_rejected() {
        let j = vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(5.0, 5.0)];
        let s = vec![Segment { a: 0, b: 1, speed_limit: 10.0 }];
        assert!(RoadNetwork::new(j.clone(), s).is_err());
        let bad = vec![Segment { a: 0, b: 7, speed_limit: 10.0 }];
        assert!(RoadNetwork::new(j, bad).is_err());
    }

    #[test]
    fn short_simulation_shape_and_speed() {
        let net = generate_grid_network(3, 3, 100.0, 14.0).unwrap();
        let traces = simulate_traces(&net, 3, 10.0, 1.0, 5).unwrap();
        assert_eq!(traces.n_vehicles(), 3);
        assert_eq!(traces.duration(), 11);
        for track in &traces.tracks {
            for w in track.samples.windows(2) {
                assert!(w[0].pos.dist(w[1].pos) <= 14.0 + 1e-9);
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let net = generate_grid_network(4, 4, 100.0, 14.0).unwrap();
        let a = simulate_traces(&net, 5, 60.0, 1.0, 42).unwrap();
        let b = simulate_traces(&net, 5, 60.0, 1.0, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_traces(&net, 5, 60.0, 1.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn vehicles_stay_on_roads_with_consistent_heading() {
        let net = generate_grid_network(4, 4, 100.0, 14.0).unwrap();
        let traces = simulate_traces(&net, 50, 120.0, 1.0, 9).unwrap();
        let extent = net.extent();
        for track in &traces.tracks {
            for s in &track.samples {
                assert!(net.distance_to_network(s.pos) < 1e-6);
                assert!(extent.contains(s.pos, 1e-9));
                assert!(s.heading > -std::f64::consts::PI && s.heading <= std::f64::consts::PI);
            }
            for w in track.samples.windows(2) {
                let d = w[1].pos - w[0].pos;
                if d.norm() > 1e-9 {
                    assert!((wrap_angle(d.y.atan2(d.x)) - w[1].heading).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn vehicles_actually_move() {
        let net = generate_grid_network(4, 4, 100.0, 14.0).unwrap();
        let traces = simulate_traces(&net, 4, 100.0, 1.0, 1).unwrap();
        for track in &traces.tracks {
            let path: f64 = track.samples.windows(2).map(|w| w[0].pos.dist(w[1].pos)).sum();
            assert!(path > 0.8 * 14.0 * 100.0 * 0.8, "path {path}");
        }
    }

    fn dummy_traces(n: usize) -> TraceSet {
        let tracks = (0..n)
            .map(|i| VehicleTrack {
                id: i as u32,
                samples: vec![TraceSample { pos: Point2::new(i as f64, 0.0), heading: 0.0 }; 3],
            })
            .collect();
        TraceSet::new(1.0, tracks).unwrap()
    }

    #[test]
    fn split_sizes_match_reference_counts() {
        let traces = dummy_traces(505);
        let (train, test) = split_vehicles(&traces, 0.701, 3).unwrap();
        assert_eq!((train.n_vehicles(), test.n_vehicles()), (354, 151));
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let traces = dummy_traces(10);
        let (a, b) = split_vehicles(&traces, 0.5, 11).unwrap();
        assert_eq!((a.n_vehicles(), b.n_vehicles()), (5, 5));
        let mut ids: Vec<u32> = a.tracks.iter().chain(&b.tracks).map(|t| t.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        let (a2, b2) = split_vehicles(&traces, 0.5, 11).unwrap();
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(split_vehicles(&dummy_traces(1), 0.5, 0).is_err());
        assert!(split_vehicles(&dummy_traces(4), 0.0, 0).is_err());
        assert!(split_vehicles(&dummy_traces(4), 1.0, 0).is_err());
    }
}
