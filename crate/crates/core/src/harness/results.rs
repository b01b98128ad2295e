//! Result tables, bootstrap errors and CSV artifacts.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::mlcl::CurvePoint;
use crate::rng;
use crate::sensing::Episode;

use super::config::{ExperimentConfig, Scheme};

pub const RESULT_HEADER: &str = "scheme,axis,axis_value,mae_m,stderr_m,n_episodes";
pub const CURVE_HEADER: &str = "step,train_loss_m,eval_mae_m";
pub const ESTIMATES_HEADER: &str = "scheme,episode,vehicle_id,t,xhat_m,yhat_m,err_m";

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub scheme: Scheme,
    pub axis: String,
    pub axis_value: f64,
    pub mae_m: f64,
    pub stderr_m: f64,
    pub n_episodes: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn get(&self, scheme: Scheme, axis_value: f64) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.scheme == scheme && r.axis_value == axis_value)
    }

    pub fn series(&self, scheme: Scheme) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.scheme == scheme).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(RESULT_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.scheme, r.axis, r.axis_value, r.mae_m, r.stderr_m, r.n_episodes
            ));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard deviation of the resampled means of `values` (`resamples` draws with replacement).
pub fn bootstrap_stderr(values: &[f64], resamples: usize, seed: u64) -> f64 {
    let n = values.len();
    if n < 2 || resamples < 2 {
        return 0.0;
    }
    let mut r = rng::from_seed(seed);
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[r.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let m = mean(&means);
    (means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (resamples - 1) as f64).sqrt()
}

/// One table row summarizing per-episode errors.
pub fn summarize(cfg: &ExperimentConfig, scheme: Scheme, axis: &str, axis_value: f64, per_episode: &[f64]) -> Result<ResultRow> {
    if per_episode.is_empty() {
        return Err(Error::InvalidArgument(format!("no episodes for {scheme} at {axis}={axis_value}")));
    }
    // streams depend on the row identity only, not on which other rows exist
    let tag = format!("bootstrap/{scheme}/{axis}");
    let seed = rng::derive_seed(cfg.seed, &tag, axis_value.to_bits());
    Ok(ResultRow {
        scheme,
        axis: axis.to_string(),
        axis_value,
        mae_m: mean(per_episode),
        stderr_m: bootstrap_stderr(per_episode, cfg.bootstrap_resamples, seed),
        n_episodes: per_episode.len(),
    })
}

/// Per-episode mean radial error of `estimates` (`[episode][t][vehicle]`).
pub fn episode_errors(episodes: &[Episode], estimates: &[Vec<Vec<Point2>>]) -> Result<Vec<f64>> {
    if episodes.len() != estimates.len() {
        return Err(Error::shape("episode_errors", format!("{} episodes, {} estimates", episodes.len(), estimates.len())));
    }
    episodes
        .iter()
        .zip(estimates)
        .map(|(ep, est)| {
            let (mut sum, mut count) = (0.0, 0usize);
            for (row, step) in est.iter().zip(&ep.steps) {
                for (e, t) in row.iter().zip(&step.truth) {
                    sum += e.dist(*t);
                    count += 1;
                }
            }
            if count != ep.window() * ep.n_vehicles() || !sum.is_finite() {
                return Err(Error::Numeric(format!("episode {}: missing or non-finite estimates", ep.seed)));
            }
            Ok(sum / count as f64)
        })
        .collect()
}

/// Per-episode mean radial error at step `k` only.
pub fn step_errors(episodes: &[Episode], estimates: &[Vec<Vec<Point2>>], k: usize) -> Vec<f64> {
    episodes
        .iter()
        .zip(estimates)
        .map(|(ep, est)| {
            let row = &est[k];
            row.iter().zip(&ep.steps[k].truth).map(|(e, t)| e.dist(*t)).sum::<f64>() / row.len() as f64
        })
        .collect()
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for c in curve {
        let eval = c.eval_mae_m.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", c.step, c.train_loss_m, eval));
    }
    out
}

pub fn estimates_csv(out: &mut String, scheme: Scheme, episodes: &[Episode], estimates: &[Vec<Vec<Point2>>]) {
    if out.is_empty() {
        out.push_str(ESTIMATES_HEADER);
        out.push('\n');
    }
    for (e, (ep, est)) in episodes.iter().zip(estimates).enumerate() {
        for (k, row) in est.iter().enumerate() {
            for (a, p) in row.iter().enumerate() {
                let err = p.dist(ep.steps[k].truth[a]);
                out.push_str(&format!("{scheme},{e},{},{k},{},{},{err}\n", ep.vehicle_ids[a], p.x, p.y));
            }
        }
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    artifact: &'a str,
    config_hash: String,
    seed: u64,
    code_version: &'a str,
}

pub const CODE_VERSION: &str = concat!("mlcl-core ", env!("CARGO_PKG_VERSION"));

/// Writes `text` to `dir/name` and its provenance record to `dir/name.provenance.json`.
pub fn write_artifact(dir: &Path, name: &str, text: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let prov = Provenance { artifact: name, config_hash: cfg.hash(), seed: cfg.seed, code_version: CODE_VERSION };
    let ppath = dir.join(format!("{name}.provenance.json"));
    std::fs::write(&ppath, serde_json::to_string_pretty(&prov)? + "\n").map_err(|e| Error::io(&ppath, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bootstrap_matches_analytic_stderr() {
        let mut r = rng::from_seed(4);
        let v: Vec<f64> = (0..200).map(|_| r.random_range(0.0..1.0)).collect();
        let m = mean(&v);
        let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        let analytic = sd / (v.len() as f64).sqrt();
        let b = bootstrap_stderr(&v, 4000, 1);
        assert!((b - analytic).abs() < 0.1 * analytic, "{b} vs {analytic}");
        assert_eq!(b, bootstrap_stderr(&v, 4000, 1));
        assert_eq!(bootstrap_stderr(&[3.0], 100, 1), 0.0);
        assert_eq!(bootstrap_stderr(&[2.0; 10], 100, 1), 0.0);
    }

    #[test]
    fn table_csv_layout() {
        let cfg = ExperimentConfig::default();
        let row = summarize(&cfg, Scheme::Naive, "t", 3.0, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(row.mae_m, 2.0);
        let t = ResultTable { rows: vec![row] };
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(RESULT_HEADER));
        assert!(lines.next().unwrap().starts_with("naive,t,3,2,"));
        assert!(summarize(&cfg, Scheme::Naive, "t", 0.0, &[]).is_err());
    }

    #[test]
    fn curve_rows_leave_missing_eval_blank() {
        let c = [
            CurvePoint { step: 1, train_loss_m: 5.5, eval_mae_m: None },
            CurvePoint { step: 2, train_loss_m: 4.0, eval_mae_m: Some(3.25) },
        ];
        assert_eq!(curve_csv(&c), "step,train_loss_m,eval_mae_m\n1,5.5,\n2,4,3.25\n");
    }

    #[test]
    fn artifacts_come_with_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        write_artifact(dir.path(), "x.csv", "a\n", &cfg).unwrap();
        let p: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("x.csv.provenance.json")).unwrap()).unwrap();
        assert_eq!(p["config_hash"], cfg.hash());
        assert_eq!(p["seed"], 0);
        assert!(p["code_version"].as_str().unwrap().starts_with("mlcl-core"));
    }
}
