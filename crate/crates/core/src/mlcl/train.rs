//! Mini-batch training and evaluation shared by the learned estimators.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::rng;
use crate::sensing::Episode;
use crate::tensorcore::{adam_step, AdamState, Tensor};

use super::rollout::{rollout_batch, RolloutMode};
use super::MlclParams;

/// Episodes per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;

/// A differentiable estimator trained on episodes.
pub trait Model {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
    /// Batch loss (mean radial error, meters) and its gradients in parameter order.
    fn loss_and_grads(&self, batch: &[&Episode]) -> Result<(f64, Vec<Tensor>)>;
    /// Estimates for each episode, indexed `[episode][t][vehicle]`.
    fn estimate(&self, batch: &[&Episode]) -> Result<Vec<Vec<Vec<Point2>>>>;
}

/// The recurrent localizer together with its communication switch.
#[derive(Clone, Debug, PartialEq)]
pub struct MlclModel {
    pub params: MlclParams,
    pub disable_comm: bool,
}

impl Model for MlclModel {
    fn parameters(&self) -> Vec<&Tensor> {
        self.params.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.tensors_mut()
    }

    fn loss_and_grads(&self, batch: &[&Episode]) -> Result<(f64, Vec<Tensor>)> {
        let r = rollout_batch(&self.params, batch, self.disable_comm, RolloutMode::Sparse)?;
        Ok((r.loss(), r.gradients()?))
    }

    fn estimate(&self, batch: &[&Episode]) -> Result<Vec<Vec<Vec<Point2>>>> {
        let r = rollout_batch(&self.params, batch, self.disable_comm, RolloutMode::Sparse)?;
        Ok((0..batch.len()).map(|e| r.estimates(e)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Total optimizer steps, counting any already taken by a resumed state.
    pub steps: u64,
    pub seed: u64,
    /// Evaluate every this many steps (and after the last); 0 disables.
    pub eval_every: u64,
    /// Rescale the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Cosine-anneal the learning rate down to `lr * fraction` at the last step.
    pub lr_floor: Option<f64>,
}

impl TrainConfig {
    /// Learning rate used for the update that follows `step` completed steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_floor {
            None => self.lr,
            Some(f) => {
                let progress = (step as f64 / self.steps.max(1) as f64).min(1.0);
                let floor = self.lr * f;
                floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: AdamState::DEFAULT_LR, batch_size: 32, steps: 2000, seed: 0, eval_every: 100, clip_norm: None, lr_floor: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub train_loss_m: f64,
    pub eval_mae_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub per_episode: Vec<f64>,
    /// Mean radial error at each step of the window, over all episodes and vehicles.
    pub per_step: Vec<f64>,
    /// Mean of `per_episode`.
    pub mae: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    pub adam: AdamState,
}

/// Indices of the episodes used at optimizer step `step`.
pub fn batch_indices(seed: u64, step: u64, n_train: usize, batch_size: usize) -> Vec<usize> {
    if batch_size >= n_train {
        return (0..n_train).collect();
    }
    let mut r = rng::stream(seed, "batch", step);
    let mut idx = index::sample(&mut r, n_train, batch_size).into_vec();
    idx.sort_unstable();
    idx
}

/// Trains `model` with Adam until `cfg.steps` optimizer steps have been taken.
///
/// Passing the state from an earlier run resumes it; batches depend only on
/// the seed and the step index, so a resumed run retraces the uninterrupted one.
pub fn train<M: Model>(
    model: &mut M,
    train_set: &[Episode],
    eval_set: &[Episode],
    cfg: &TrainConfig,
    resume: Option<AdamState>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("training needs episodes and a positive batch size".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be finite and non-negative", cfg.lr)));
    }
    let mut adam = match resume {
        Some(a) => {
            if a.m.len() != model.parameters().len() {
                return Err(Error::Checkpoint("optimizer state does not match the model".into()));
            }
            a
        }
        None => AdamState::new(model.parameters(), cfg.lr),
    };
    let mut curve = Vec::new();
    while adam.step < cfg.steps {
        let step = adam.step;
        adam.lr = cfg.lr_at(step);
        let batch: Vec<&Episode> =
            batch_indices(cfg.seed, step, train_set.len(), cfg.batch_size).into_iter().map(|i| &train_set[i]).collect();
        let (loss, mut grads) = model.loss_and_grads(&batch)?;
        if let Some(max) = cfg.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        adam_step(&mut model.parameters_mut(), &grads, &mut adam)?;
        if model.parameters().iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("parameters became non-finite at step {}", adam.step)));
        }
        let done = adam.step;
        let eval_now = cfg.eval_every > 0 && !eval_set.is_empty() && (done % cfg.eval_every == 0 || done == cfg.steps);
        let eval_mae_m = if eval_now { Some(evaluate(model, eval_set)?.mae) } else { None };
        curve.push(CurvePoint { step: done, train_loss_m: loss, eval_mae_m });
    }
    Ok(TrainOutcome { curve, adam })
}

fn clip_global_norm(grads: &mut [Tensor], max: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Mean radial errors of `model` on `episodes`.
pub fn evaluate<M: Model + ?Sized>(model: &M, episodes: &[Episode]) -> Result<EvalSummary> {
    let mut per_episode = Vec::with_capacity(episodes.len());
    let mut step_sum: Vec<f64> = Vec::new();
    let mut step_count: Vec<usize> = Vec::new();
    for chunk in episodes.chunks(EVAL_CHUNK) {
        let refs: Vec<&Episode> = chunk.iter().collect();
        let all = model.estimate(&refs)?;
        for (est, ep) in all.iter().zip(chunk) {
            let (mut sum, mut count) = (0.0, 0usize);
            for (k, (row, step)) in est.iter().zip(&ep.steps).enumerate() {
                if step_sum.len() <= k {
                    step_sum.resize(k + 1, 0.0);
                    step_count.resize(k + 1, 0);
                }
                for (e, t) in row.iter().zip(&step.truth) {
                    let d = e.dist(*t);
                    if !d.is_finite() {
                        return Err(Error::Numeric(format!("non-finite estimate in episode {}", ep.seed)));
                    }
                    sum += d;
                    count += 1;
                    step_sum[k] += d;
                    step_count[k] += 1;
                }
            }
            per_episode.push(if count == 0 { 0.0 } else { sum / count as f64 });
        }
    }
    let per_step = step_sum.iter().zip(&step_count).map(|(s, &c)| s / c.max(1) as f64).collect();
    let mae = if per_episode.is_empty() { f64::NAN } else { per_episode.iter().sum::<f64>() / per_episode.len() as f64 };
    Ok(EvalSummary { per_episode, per_step, mae })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlcl::{rollout, MlclDims};
    use crate::sensing::{make_episode, NoiseConfig};
    use crate::world::{generate_grid_network, simulate_traces};

    fn episodes(n: usize, seed: u64) -> Vec<Episode> {
        let net = generate_grid_network(4, 4, 150.0, 14.0).unwrap();
        let t = simulate_traces(&net, 20, 60.0, 1.0, 5).unwrap();
        let cfg = NoiseConfig::default();
        (0..n as u64).map(|i| make_episode(&t, 4, 5, &cfg, seed + i).unwrap()).collect()
    }

    fn model(seed: u64) -> MlclModel {
        let p = MlclParams::init(MlclDims { state: 6, message: 5, hidden: 8 }, 1000.0, 500.0, &mut rng::from_seed(seed));
        MlclModel { params: p, disable_comm: false }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let eps = episodes(4, 1);
        let mut m = model(1);
        let before = m.clone();
        let cfg = TrainConfig { lr: 0.0, batch_size: 2, steps: 5, eval_every: 0, ..TrainConfig::default() };
        let out = train(&mut m, &eps, &[], &cfg, None).unwrap();
        assert_eq!(m, before);
        assert_eq!(out.curve.len(), 5);
        assert_eq!(out.adam.step, 5);
    }

    #[test]
    fn small_step_decreases_loss_on_fixed_batch() {
        let eps = episodes(3, 2);
        let refs: Vec<&Episode> = eps.iter().collect();
        let mut m = model(2);
        let (l0, _) = m.loss_and_grads(&refs).unwrap();
        let cfg = TrainConfig { lr: 1e-5, batch_size: 3, steps: 1, eval_every: 0, ..TrainConfig::default() };
        train(&mut m, &eps, &[], &cfg, None).unwrap();
        let (l1, _) = m.loss_and_grads(&refs).unwrap();
        assert!(l1 < l0, "{l1} !< {l0}");
    }

    #[test]
    fn evaluate_matches_single_rollouts() {
        let eps = episodes(5, 3);
        let m = model(3);
        let summary = evaluate(&m, &eps).unwrap();
        for (ep, &mae) in eps.iter().zip(&summary.per_episode) {
            let rec = rollout(&m.params, ep, false).unwrap();
            assert_eq!(rec.loss, mae);
        }
        let mean = summary.per_episode.iter().sum::<f64>() / 5.0;
        assert_eq!(summary.mae, mean);
        assert_eq!(summary.per_step.len(), 5);
        let overall = summary.per_step.iter().sum::<f64>() / 5.0;
        assert!((overall - mean).abs() < 1e-9);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let eps = episodes(6, 4);
        let cfg = TrainConfig { lr: 1e-3, batch_size: 2, steps: 6, eval_every: 3, seed: 9, ..TrainConfig::default() };
        let mut full = model(4);
        let a = train(&mut full, &eps, &eps[..2], &cfg, None).unwrap();
        let mut part = model(4);
        let b = train(&mut part, &eps, &eps[..2], &TrainConfig { steps: 4, ..cfg.clone() }, None).unwrap();
        let c = train(&mut part, &eps, &eps[..2], &cfg, Some(b.adam)).unwrap();
        assert_eq!(full, part);
        assert_eq!(a.curve[4..], c.curve[..]);
        assert!(a.curve[2].eval_mae_m.is_some() && a.curve[5].eval_mae_m.is_some());
        assert!(a.curve[0].eval_mae_m.is_none());
    }

    #[test]
    fn batch_indices_are_distinct_and_deterministic() {
        let a = batch_indices(1, 7, 50, 10);
        assert_eq!(a, batch_indices(1, 7, 50, 10));
        assert_ne!(a, batch_indices(1, 8, 50, 10));
        assert!(a.windows(2).all(|w| w[0] < w[1]) && a.len() == 10);
        assert_eq!(batch_indices(1, 0, 3, 10), vec![0, 1, 2]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig { lr: 1e-3, steps: 100, lr_floor: Some(0.1), ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(50) - 0.55e-3).abs() < 1e-15);
        assert!((cfg.lr_at(100) - 1e-4).abs() < 1e-15);
        assert_eq!(TrainConfig { lr_floor: None, ..cfg }.lr_at(70), 1e-3);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 0.0]), Tensor::vector(vec![4.0])];
        clip_global_norm(&mut g, 1.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12 && (g[1].data()[0] - 0.8).abs() < 1e-12);
        clip_global_norm(&mut g, 5.0);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-12);
    }
}
