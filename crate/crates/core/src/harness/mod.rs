//! Experiment orchestration: datasets, training runs, evaluations and sweeps.
//!
//! Every command is a pure function of the configuration (including its master
//! seed) and the files it is pointed at, so repeated runs write identical bytes.

pub mod config;
pub mod dataset;
pub mod results;

use std::collections::BTreeMap;
use std::path::Path;

use crate::baselines::{ekf_run, mle_window, naive_estimate, GcnModel, GcnParams, MleOptions};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::mlcl::{train, CurvePoint, MlclModel, MlclParams, Model};
use crate::rng::{derive_seed, from_seed};
use crate::sensing::Episode;
use crate::tensorcore::checkpoint::Checkpoint;
use crate::tensorcore::AdamState;

pub use config::{ExperimentConfig, Scheme, SweepAxis};
pub use dataset::{build_dataset, load_dataset, save_dataset, Dataset, Manifest};
pub use results::{ResultRow, ResultTable};

/// Group sizes swept when none are configured.
pub const DEFAULT_SWEEP_N: [f64; 11] = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
/// Communication ranges swept when none are configured, meters.
pub const DEFAULT_SWEEP_RANGE: [f64; 5] = [0.0, 100.0, 200.0, 400.0, 800.0];

/// Parameters of the learned schemes.
#[derive(Clone, Debug, Default)]
pub struct Trained {
    pub models: BTreeMap<Scheme, LearnedParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LearnedParams {
    Mlcl(MlclParams),
    Gcn(GcnParams),
}

impl LearnedParams {
    fn model(&self, scheme: Scheme) -> LearnedModel {
        match self {
            LearnedParams::Mlcl(p) => {
                LearnedModel::Mlcl(MlclModel { params: p.clone(), disable_comm: scheme == Scheme::Nc })
            }
            LearnedParams::Gcn(p) => LearnedModel::Gcn(GcnModel { params: p.clone() }),
        }
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value, adam: Option<&AdamState>) -> Checkpoint {
        match self {
            LearnedParams::Mlcl(p) => p.to_checkpoint(meta, adam),
            LearnedParams::Gcn(p) => p.to_checkpoint(meta, adam),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<AdamState>)> {
        match ck.meta.get("kind").and_then(|k| k.as_str()) {
            Some("gcn") => GcnParams::from_checkpoint(ck).map(|(p, a)| (LearnedParams::Gcn(p), a)),
            _ => MlclParams::from_checkpoint(ck).map(|(p, a)| (LearnedParams::Mlcl(p), a)),
        }
    }
}

enum LearnedModel {
    Mlcl(MlclModel),
    Gcn(GcnModel),
}

impl LearnedModel {
    fn params(&self) -> LearnedParams {
        match self {
            LearnedModel::Mlcl(m) => LearnedParams::Mlcl(m.params.clone()),
            LearnedModel::Gcn(m) => LearnedParams::Gcn(m.params.clone()),
        }
    }

    fn as_model(&mut self) -> &mut dyn Model {
        match self {
            LearnedModel::Mlcl(m) => m,
            LearnedModel::Gcn(m) => m,
        }
    }
}

impl Model for LearnedModel {
    fn parameters(&self) -> Vec<&crate::tensorcore::Tensor> {
        match self {
            LearnedModel::Mlcl(m) => m.parameters(),
            LearnedModel::Gcn(m) => m.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut crate::tensorcore::Tensor> {
        self.as_model().parameters_mut()
    }

    fn loss_and_grads(&self, batch: &[&Episode]) -> Result<(f64, Vec<crate::tensorcore::Tensor>)> {
        match self {
            LearnedModel::Mlcl(m) => m.loss_and_grads(batch),
            LearnedModel::Gcn(m) => m.loss_and_grads(batch),
        }
    }

    fn estimate(&self, batch: &[&Episode]) -> Result<Vec<Vec<Vec<Point2>>>> {
        match self {
            LearnedModel::Mlcl(m) => m.estimate(batch),
            LearnedModel::Gcn(m) => m.estimate(batch),
        }
    }
}

/// Freshly initialized parameters; `nc` shares the localizer's initialization.
pub fn init_params(cfg: &ExperimentConfig, scheme: Scheme, origin: Point2) -> Result<LearnedParams> {
    let mut r = from_seed(derive_seed(cfg.init_seed, "init", 0));
    let range_scale = if cfg.noise.rho_meas > 0.0 { cfg.noise.rho_meas } else { 1.0 };
    match scheme {
        Scheme::Mlcl | Scheme::Nc => Ok(LearnedParams::Mlcl(
            MlclParams::init(cfg.dims, cfg.position_scale, range_scale, &mut r).with_origin(origin),
        )),
        Scheme::Gcn => Ok(LearnedParams::Gcn(
            GcnParams::init(cfg.dims.hidden, cfg.position_scale, range_scale, &mut r).with_origin(origin),
        )),
        other => Err(Error::InvalidArgument(format!("{other} has no trainable parameters"))),
    }
}

pub struct TrainRun {
    pub params: LearnedParams,
    pub adam: AdamState,
    pub curve: Vec<CurvePoint>,
}

/// Trains one learned scheme on the dataset's training episodes, optionally
/// resuming from a checkpoint that carries optimizer state.
pub fn train_scheme(cfg: &ExperimentConfig, ds: &Dataset, scheme: Scheme, resume: Option<&Checkpoint>) -> Result<TrainRun> {
    let (start, adam) = match resume {
        Some(ck) => {
            let (p, adam) = LearnedParams::from_checkpoint(ck)?;
            (p, Some(adam.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?))
        }
        None => (init_params(cfg, scheme, ds.origin())?, None),
    };
    let mut model = start.model(scheme);
    let out = train(&mut model, &ds.train, &ds.test, &cfg.train_config(), adam)?;
    Ok(TrainRun { params: model.params(), adam: out.adam, curve: out.curve })
}

/// Estimates `[episode][t][vehicle]` of one scheme.
pub fn estimate(cfg: &ExperimentConfig, trained: &Trained, scheme: Scheme, episodes: &[Episode]) -> Result<Vec<Vec<Vec<Point2>>>> {
    match scheme {
        Scheme::Naive => Ok(episodes.iter().map(naive_estimate).collect()),
        Scheme::Ekf => episodes.iter().map(|ep| ekf_run(ep, &cfg.noise, cfg.ekf_accel_std)).collect(),
        Scheme::Mle => {
            let opts = MleOptions { max_iters: cfg.mle_max_iters, motion_prior: cfg.mle_motion_prior, ..MleOptions::default() };
            episodes
                .iter()
                .map(|ep| {
                    let sol = mle_window(ep, &cfg.noise, &opts)?;
                    if let Some(w) = &sol.warning {
                        eprintln!("warning: episode {}: {w}", ep.seed);
                    }
                    Ok(sol.positions)
                })
                .collect()
        }
        learned => {
            let params = trained
                .models
                .get(&learned)
                .ok_or_else(|| Error::InvalidArgument(format!("no trained parameters for {learned}")))?;
            estimate_learned(params, learned, episodes)
        }
    }
}

/// Estimates of learned parameters run as `as_scheme`; MLCL parameters run as
/// [`Scheme::Nc`] evaluate with communication disabled.
pub fn estimate_learned(params: &LearnedParams, as_scheme: Scheme, episodes: &[Episode]) -> Result<Vec<Vec<Vec<Point2>>>> {
    let model = params.model(as_scheme);
    let mut out = Vec::with_capacity(episodes.len());
    for chunk in episodes.chunks(32) {
        let refs: Vec<&Episode> = chunk.iter().collect();
        out.extend(model.estimate(&refs)?);
    }
    Ok(out)
}

fn checkpoint_path(dir: &Path, scheme: Scheme) -> std::path::PathBuf {
    dir.join(format!("{scheme}.ckpt.json"))
}

/// Loads `<scheme>.ckpt.json` for every learned scheme of the configuration.
pub fn load_trained(cfg: &ExperimentConfig, dir: &Path) -> Result<Trained> {
    let mut trained = Trained::default();
    for &s in cfg.schemes.iter().filter(|s| s.is_learned()) {
        let (p, _) = LearnedParams::from_checkpoint(&Checkpoint::load(checkpoint_path(dir, s))?)?;
        trained.models.insert(s, p);
    }
    Ok(trained)
}

/// `gen`: writes the dataset and returns its manifest.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let ds = build_dataset(cfg)?;
    let manifest = save_dataset(&ds, cfg, out)?;
    let traces = std::fs::read_to_string(out.join("traces.csv")).map_err(|e| Error::io(out.join("traces.csv"), e))?;
    results::write_artifact(out, "traces.csv", &traces, cfg)?;
    Ok(manifest)
}

/// `train`: trains every learned scheme, writing checkpoints and learning curves.
pub fn cmd_train(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, resume: Option<&Path>) -> Result<Trained> {
    let mut trained = Trained::default();
    for &scheme in cfg.schemes.iter().filter(|s| s.is_learned()) {
        let ck = match resume {
            Some(dir) => Some(Checkpoint::load(checkpoint_path(dir, scheme))?),
            None => None,
        };
        let run = train_scheme(cfg, ds, scheme, ck.as_ref())?;
        let meta = serde_json::json!({ "scheme": scheme.as_str(), "config_hash": cfg.hash(), "seed": cfg.seed });
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        run.params.to_checkpoint(meta, Some(&run.adam)).save(checkpoint_path(out, scheme))?;
        results::write_artifact(out, &format!("{scheme}_curve.csv"), &results::curve_csv(&run.curve), cfg)?;
        trained.models.insert(scheme, run.params);
    }
    Ok(trained)
}

/// Trains in memory without writing anything.
pub fn train_all(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Trained> {
    let mut trained = Trained::default();
    for &scheme in cfg.schemes.iter().filter(|s| s.is_learned()) {
        trained.models.insert(scheme, train_scheme(cfg, ds, scheme, None)?.params);
    }
    Ok(trained)
}

pub struct EvalReport {
    /// Rows over time, `axis = t`, `axis_value` in seconds from the window start.
    pub by_time: ResultTable,
    /// One row per scheme over the whole window, `axis = none`.
    pub summary: ResultTable,
    /// Per-episode errors of each scheme, in test-set order.
    pub per_episode: BTreeMap<Scheme, Vec<f64>>,
}

/// Evaluates every configured scheme on `episodes`.
pub fn evaluate_schemes(cfg: &ExperimentConfig, trained: &Trained, episodes: &[Episode]) -> Result<(EvalReport, String)> {
    let mut by_time = ResultTable::default();
    let mut summary = ResultTable::default();
    let mut per_episode = BTreeMap::new();
    let mut estimates_text = String::new();
    let window = episodes.first().map_or(0, Episode::window);
    let dt = episodes.first().map_or(1.0, |e| e.dt);
    for &scheme in &cfg.schemes {
        let est = estimate(cfg, trained, scheme, episodes)?;
        let errs = results::episode_errors(episodes, &est)?;
        for k in 0..window {
            let t = k as f64 * dt;
            by_time.rows.push(results::summarize(cfg, scheme, "t", t, &results::step_errors(episodes, &est, k))?);
        }
        summary.rows.push(results::summarize(cfg, scheme, "none", 0.0, &errs)?);
        results::estimates_csv(&mut estimates_text, scheme, episodes, &est);
        per_episode.insert(scheme, errs);
    }
    Ok((EvalReport { by_time, summary, per_episode }, estimates_text))
}

/// `eval`: MAE over time on the test episodes.
pub fn cmd_eval(cfg: &ExperimentConfig, ds: &Dataset, trained: &Trained, out: &Path) -> Result<EvalReport> {
    let (report, estimates_text) = evaluate_schemes(cfg, trained, &ds.test)?;
    results::write_artifact(out, "mae_vs_time.csv", &report.by_time.to_csv(), cfg)?;
    results::write_artifact(out, "summary.csv", &report.summary.to_csv(), cfg)?;
    results::write_artifact(out, "estimates.csv", &estimates_text, cfg)?;
    Ok(report)
}

fn sweep_values(cfg: &ExperimentConfig, axis: SweepAxis, default: &[f64]) -> Vec<f64> {
    if cfg.sweep_axis == axis && !cfg.sweep_values.is_empty() {
        cfg.sweep_values.clone()
    } else {
        default.to_vec()
    }
}

/// Test episodes with `group_size` vehicles, drawn from the test traces.
pub fn sweep_n_episodes(cfg: &ExperimentConfig, ds: &Dataset, group_size: usize) -> Result<Vec<Episode>> {
    dataset::episodes(
        &ds.test_traces,
        cfg.n_test_episodes,
        group_size,
        cfg.window,
        &cfg.noise,
        cfg.seed,
        &format!("sweep-n/{group_size}"),
    )
}

/// `sweep-n`: evaluates models trained at the configured group size across group sizes.
pub fn cmd_sweep_n(cfg: &ExperimentConfig, ds: &Dataset, trained: &Trained, out: &Path) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    for n in sweep_values(cfg, SweepAxis::NVehicles, &DEFAULT_SWEEP_N) {
        let eps = sweep_n_episodes(cfg, ds, n as usize)?;
        for &scheme in &cfg.schemes {
            let errs = results::episode_errors(&eps, &estimate(cfg, trained, scheme, &eps)?)?;
            table.rows.push(results::summarize(cfg, scheme, SweepAxis::NVehicles.as_str(), n, &errs)?);
        }
    }
    results::write_artifact(out, "sweep_n.csv", &table.to_csv(), cfg)?;
    Ok(table)
}

/// The test episodes with their communication graphs redrawn for range `rho`.
pub fn sweep_range_episodes(cfg: &ExperimentConfig, ds: &Dataset, rho: f64) -> Vec<Episode> {
    ds.test.iter().map(|ep| ep.with_comm_range(rho, cfg.noise.p_fail)).collect()
}

/// `sweep-range`: evaluates fixed models across communication ranges.
pub fn cmd_sweep_range(cfg: &ExperimentConfig, ds: &Dataset, trained: &Trained, out: &Path) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    for rho in sweep_values(cfg, SweepAxis::CommRange, &DEFAULT_SWEEP_RANGE) {
        let eps = sweep_range_episodes(cfg, ds, rho);
        for &scheme in &cfg.schemes {
            let errs = results::episode_errors(&eps, &estimate(cfg, trained, scheme, &eps)?)?;
            table.rows.push(results::summarize(cfg, scheme, SweepAxis::CommRange.as_str(), rho, &errs)?);
        }
    }
    results::write_artifact(out, "sweep_range.csv", &table.to_csv(), cfg)?;
    Ok(table)
}
