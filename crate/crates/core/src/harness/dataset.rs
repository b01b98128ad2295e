//! Deterministic datasets: traces, train/test episodes and their manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::rng::derive_seed;
use crate::sensing::io::{read_episode, write_episode, EpisodeMeta};
use crate::sensing::{make_episode, Episode, NoiseConfig};
use crate::world::{generate_grid_network, load_traces, save_traces, simulate_traces, split_vehicles, RoadNetwork, TraceSet};

use super::config::ExperimentConfig;

pub const MANIFEST_FORMAT: &str = "mlcl-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub noise: NoiseConfig,
    pub dt: f64,
    pub group_size: usize,
    pub window: usize,
    pub train_vehicles: Vec<u32>,
    pub test_vehicles: Vec<u32>,
    pub train: Vec<EpisodeMeta>,
    pub test: Vec<EpisodeMeta>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub network: RoadNetwork,
    pub traces: TraceSet,
    pub train_traces: TraceSet,
    pub test_traces: TraceSet,
    pub train: Vec<Episode>,
    pub test: Vec<Episode>,
}

impl Dataset {
    /// Center of the road network, used as the normalization origin.
    pub fn origin(&self) -> Point2 {
        let e = self.network.extent();
        e.min.lerp(e.max, 0.5)
    }
}

pub fn build_network(cfg: &ExperimentConfig) -> Result<RoadNetwork> {
    let w = &cfg.world;
    generate_grid_network(w.grid_rows, w.grid_cols, w.spacing_m, w.speed_limit_mps)
}

/// Episodes of `group_size` vehicles drawn from `traces`, one stream per index.
pub fn episodes(
    traces: &TraceSet,
    count: usize,
    group_size: usize,
    window: usize,
    noise: &NoiseConfig,
    master: u64,
    tag: &str,
) -> Result<Vec<Episode>> {
    (0..count as u64).map(|i| make_episode(traces, group_size, window, noise, derive_seed(master, tag, i))).collect()
}

/// The full dataset implied by `cfg`; a pure function of the configuration.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let network = build_network(cfg)?;
    let w = &cfg.world;
    let traces = simulate_traces(&network, w.n_vehicles, w.duration_s, w.dt_s, derive_seed(cfg.seed, "traces", 0))?;
    let (train_traces, test_traces) = split_vehicles(&traces, w.train_fraction, derive_seed(cfg.seed, "split", 0))?;
    let train = episodes(&train_traces, cfg.n_train_episodes, cfg.group_size, cfg.window, &cfg.noise, cfg.seed, "train-episode")?;
    let test = episodes(&test_traces, cfg.n_test_episodes, cfg.group_size, cfg.window, &cfg.noise, cfg.seed, "test-episode")?;
    Ok(Dataset { network, traces, train_traces, test_traces, train, test })
}

fn episode_file(split: &str, i: usize) -> String {
    format!("{split}/episode_{i:04}.jsonl")
}

/// Writes `traces.csv`, per-episode JSON-lines files and `manifest.json` under `dir`.
pub fn save_dataset(ds: &Dataset, cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    for sub in ["train", "test"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    save_traces(&ds.traces, dir.join("traces.csv"))?;
    let mut metas = [Vec::new(), Vec::new()];
    for (k, (split, eps)) in [("train", &ds.train), ("test", &ds.test)].into_iter().enumerate() {
        for (i, ep) in eps.iter().enumerate() {
            let file = episode_file(split, i);
            write_episode(ep, dir.join(&file))?;
            metas[k].push(EpisodeMeta::of(ep, file));
        }
    }
    let [train, test] = metas;
    let ids = |t: &TraceSet| t.tracks.iter().map(|v| v.id).collect();
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        noise: cfg.noise,
        dt: cfg.world.dt_s,
        group_size: cfg.group_size,
        window: cfg.window,
        train_vehicles: ids(&ds.train_traces),
        test_vehicles: ids(&ds.test_traces),
        train,
        test,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn subset(traces: &TraceSet, ids: &[u32]) -> Result<TraceSet> {
    let tracks = ids
        .iter()
        .map(|id| {
            traces
                .tracks
                .iter()
                .find(|t| t.id == *id)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("manifest names unknown vehicle {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    TraceSet::new(traces.dt, tracks)
}

/// Reads a dataset written by [`save_dataset`] and revalidates every episode.
pub fn load_dataset(dir: &Path, cfg: &ExperimentConfig) -> Result<(Dataset, Manifest)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::InvalidArgument(format!(
            "{}: unsupported dataset {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    let traces = load_traces(dir.join("traces.csv"), manifest.dt)?;
    let read = |metas: &[EpisodeMeta]| -> Result<Vec<Episode>> {
        metas
            .iter()
            .map(|m| {
                let ep = read_episode(dir.join(&m.file), m)?;
                ep.validate(&manifest.noise)?;
                Ok(ep)
            })
            .collect()
    };
    let ds = Dataset {
        network: build_network(cfg)?,
        train_traces: subset(&traces, &manifest.train_vehicles)?,
        test_traces: subset(&traces, &manifest.test_vehicles)?,
        traces,
        train: read(&manifest.train)?,
        test: read(&manifest.test)?,
    };
    Ok((ds, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.world.n_vehicles = 30;
        cfg.world.duration_s = 60.0;
        cfg.n_train_episodes = 4;
        cfg.n_test_episodes = 3;
        cfg.group_size = 4;
        cfg.window = 5;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = small();
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds.train.len(), 4);
        assert_eq!(ds.test.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(&ds, &cfg, dir.path()).unwrap();
        assert_eq!(m.train.len(), 4);
        let (back, m2) = load_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back.train, ds.train);
        assert_eq!(back.test, ds.test);
        assert_eq!(back.test_traces.n_vehicles(), ds.test_traces.n_vehicles());
        assert_eq!(ds.origin(), Point2::new(375.0, 375.0));
    }

    #[test]
    fn same_seed_same_manifest_bytes() {
        let cfg = small();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_dataset(&build_dataset(&cfg).unwrap(), &cfg, a.path()).unwrap();
        save_dataset(&build_dataset(&cfg).unwrap(), &cfg, b.path()).unwrap();
        for f in ["manifest.json", "traces.csv", "test/episode_0002.jsonl"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn scheme_list_does_not_change_data() {
        let cfg = small();
        let other = ExperimentConfig { schemes: vec![super::super::Scheme::Naive], ..small() };
        assert_eq!(build_dataset(&cfg).unwrap().test, build_dataset(&other).unwrap().test);
    }
}
