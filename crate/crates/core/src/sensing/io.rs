//! Episode JSON-lines files.
//!
//! One line per timestep:
//!
//! ```text
//! {"t":0,"truth":{"0":[x,y],...},"internal":{"0":[x,y],...},
//!  "external":[[observer,subject,range,bearing],...],
//!  "meas_edges":[[a,b],...],"comm_edges":[[a,b],...]}
//! ```
//!
//! Vehicle ids are the episode-local indices. Per-episode metadata (seed,
//! trace ids, window start) lives in the dataset manifest as [`EpisodeMeta`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::Point2;

use super::{Adjacency, DomainGraphs, Episode, EpisodeStep, ExternalMeasurement};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub file: String,
    pub seed: u64,
    pub vehicle_ids: Vec<u32>,
    pub start: usize,
    pub dt: f64,
}

impl EpisodeMeta {
    pub fn of(ep: &Episode, file: impl Into<String>) -> Self {
        Self { file: file.into(), seed: ep.seed, vehicle_ids: ep.vehicle_ids.clone(), start: ep.start, dt: ep.dt }
    }
}

/// Positions keyed by vehicle index, written in numeric key order.
struct IdMap(Vec<Point2>);

impl Serialize for IdMap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (i, p) in self.0.iter().enumerate() {
            map.serialize_entry(&i.to_string(), &[p.x, p.y])?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for IdMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw: BTreeMap<String, [f64; 2]> = BTreeMap::deserialize(d)?;
        let mut keyed = BTreeMap::new();
        for (k, v) in raw {
            let id: usize = k.parse().map_err(|_| serde::de::Error::custom(format!("bad vehicle id `{k}`")))?;
            keyed.insert(id, Point2::new(v[0], v[1]));
        }
        if keyed.keys().enumerate().any(|(i, &k)| i != k) {
            return Err(serde::de::Error::custom("vehicle ids must be 0..n"));
        }
        Ok(IdMap(keyed.into_values().collect()))
    }
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    t: usize,
    truth: IdMap,
    internal: IdMap,
    external: Vec<(usize, usize, f64, f64)>,
    meas_edges: Vec<(usize, usize)>,
    comm_edges: Vec<(usize, usize)>,
}

pub fn write_episode(ep: &Episode, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in &ep.steps {
        let line = StepLine {
            t: s.t,
            truth: IdMap(s.truth.clone()),
            internal: IdMap(s.internal.clone()),
            external: s.external.iter().map(|m| (m.observer, m.subject, m.range_meas, m.bearing_meas)).collect(),
            meas_edges: s.graphs.meas.edges(),
            comm_edges: s.graphs.comm.edges(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_episode(path: impl AsRef<Path>, meta: &EpisodeMeta) -> Result<Episode> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let n = meta.vehicle_ids.len();
    let mut steps = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let raw: StepLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if raw.truth.0.len() != n || raw.internal.0.len() != n {
            return Err(parse_err(format!("expected {n} vehicles")));
        }
        let meas = Adjacency::from_edges(n, &raw.meas_edges).map_err(|e| parse_err(e.to_string()))?;
        let comm = Adjacency::from_edges(n, &raw.comm_edges).map_err(|e| parse_err(e.to_string()))?;
        let external = raw
            .external
            .iter()
            .map(|&(observer, subject, range_meas, bearing_meas)| ExternalMeasurement {
                observer,
                subject,
                t: raw.t,
                range_meas,
                bearing_meas,
            })
            .collect();
        steps.push(EpisodeStep {
            t: raw.t,
            truth: raw.truth.0,
            internal: raw.internal.0,
            external,
            graphs: DomainGraphs { t: raw.t, meas, comm },
        });
    }
    Ok(Episode { seed: meta.seed, vehicle_ids: meta.vehicle_ids.clone(), start: meta.start, dt: meta.dt, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::{make_episode, NoiseConfig};
    use crate::world::{generate_grid_network, simulate_traces};

    #[test]
    fn episode_file_round_trip_is_exact() {
        let net = generate_grid_network(4, 4, 150.0, 14.0).unwrap();
        let traces = simulate_traces(&net, 30, 60.0, 1.0, 4).unwrap();
        let cfg = NoiseConfig::default();
        let ep = make_episode(&traces, 12, 8, &cfg, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ep.jsonl");
        write_episode(&ep, &p).unwrap();
        let meta = EpisodeMeta::of(&ep, "ep.jsonl");
        let back = read_episode(&p, &meta).unwrap();
        assert_eq!(back, ep);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 8);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["t", "truth", "internal", "external", "meas_edges", "comm_edges"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"t\":0}\n").unwrap();
        let meta = EpisodeMeta { file: "bad.jsonl".into(), seed: 0, vehicle_ids: vec![0], start: 0, dt: 1.0 };
        assert!(matches!(read_episode(&p, &meta), Err(Error::Parse { line: 1, .. })));
    }
}
