//! Forward pass over one or more episodes, recorded on a tape.
//!
//! Episodes in a batch are laid out as one disjoint graph: vehicle rows are
//! stacked, and every unit runs once per timestep over all rows that need it.
//! Each row's arithmetic is independent of the other rows, so a batched pass
//! reproduces single-episode rollouts bit for bit.

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::sensing::{encode_external_scaled, Episode};
use crate::tensorcore::{Tape, Tensor, Var};

use super::{MlclParams, ParamVars, EXT_FEAT, INT_FEAT};

/// How missing links are represented.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Units run only over existing edges.
    Sparse,
    /// Units run over every ordered vehicle pair; absent inputs are zero-filled
    /// and latents of non-neighbors are masked out of the pool.
    ZeroFilled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub payload: Vec<f64>,
}

/// Per-step outputs of a single-episode rollout; index `k` holds timestep `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    pub states: Vec<Vec<Vec<f64>>>,
    /// Messages actually delivered along communication edges.
    pub messages: Vec<Vec<Message>>,
    pub estimates: Vec<Vec<Point2>>,
    /// Mean radial error in meters.
    pub loss: f64,
}

/// Row layout of one timestep across the batch.
#[derive(Default)]
struct StepPlan {
    n_rows: usize,
    senders: Vec<usize>,
    msg_feat: Vec<f64>,
    /// `(episode, from, to)` of each message row, local vehicle ids.
    msg_pairs: Vec<(usize, usize, usize)>,
    /// Whether a message row is delivered (always true in sparse mode).
    msg_delivered: Vec<bool>,
    receivers: Vec<usize>,
    recv_msg: Vec<Option<usize>>,
    recv_feat: Vec<f64>,
    recv_mask: Vec<f64>,
    internal: Vec<f64>,
    truth: Vec<f64>,
    origin: Vec<f64>,
    weights: Vec<f64>,
}

fn plan_step(params: &MlclParams, episodes: &[&Episode], k: usize, disable_comm: bool, mode: RolloutMode) -> StepPlan {
    let mut plan = StepPlan::default();
    let n_eps = episodes.len() as f64;
    let mut offset = 0;
    for (e, ep) in episodes.iter().enumerate() {
        let step = &ep.steps[k];
        let n = ep.n_vehicles();
        let table = step.external_table();
        let feat = |a: usize, b: usize| -> [f64; EXT_FEAT] {
            match table[a * n + b] {
                Some(i) => encode_external_scaled(&step.external[i], params.range_scale),
                None => [0.0; EXT_FEAT],
            }
        };
        let comm = |a: usize, b: usize| !disable_comm && step.graphs.comm.get(a, b);
        let meas = |a: usize, b: usize| step.graphs.meas.get(a, b);

        // message rows; msg_index[a * n + b] is the row of a -> b
        let mut msg_index = vec![None; n * n];
        for a in 0..n {
            for b in 0..n {
                let wanted = match mode {
                    RolloutMode::Sparse => comm(a, b),
                    RolloutMode::ZeroFilled => a != b,
                };
                if wanted {
                    msg_index[a * n + b] = Some(plan.senders.len());
                    plan.senders.push(offset + a);
                    plan.msg_feat.extend(feat(a, b));
                    plan.msg_pairs.push((e, a, b));
                    plan.msg_delivered.push(comm(a, b));
                }
            }
        }
        // receive rows, ordered by (receiver, neighbor)
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let linked = meas(a, b) || comm(a, b);
                if mode == RolloutMode::Sparse && !linked {
                    continue;
                }
                plan.receivers.push(offset + a);
                plan.recv_msg.push(if comm(b, a) { msg_index[b * n + a] } else { None });
                plan.recv_feat.extend(feat(a, b));
                plan.recv_mask.push(if linked { 1.0 } else { 0.0 });
            }
        }
        let w = 1.0 / (n_eps * n as f64 * ep.window() as f64);
        for a in 0..n {
            let fix = step.internal[a];
            plan.internal.extend(params.normalize(fix));
            plan.truth.extend([step.truth[a].x, step.truth[a].y]);
            plan.origin.extend([params.origin.x, params.origin.y]);
            plan.weights.push(w);
        }
        offset += n;
    }
    plan.n_rows = offset;
    plan
}

/// A recorded forward pass over a batch of episodes.
pub struct BatchRollout {
    tape: Tape,
    vars: ParamVars,
    loss: Var,
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    states: Vec<Var>,
    estimates: Vec<Var>,
    messages: Vec<Option<(Var, Vec<(usize, usize, usize)>, Vec<bool>)>>,
}

/// Runs every episode of `episodes` (all with the same window) for its full window.
///
/// With `disable_comm`, communication edges are ignored entirely: no messages
/// are generated and the receive step sees only measurement neighbors.
pub fn rollout_batch(params: &MlclParams, episodes: &[&Episode], disable_comm: bool, mode: RolloutMode) -> Result<BatchRollout> {
    params.check_dims()?;
    let Some(first) = episodes.first() else {
        return Err(Error::InvalidArgument("rollout needs at least one episode".into()));
    };
    let window = first.window();
    if window == 0 || episodes.iter().any(|e| e.window() != window) {
        return Err(Error::InvalidArgument("episodes in a batch must share a non-zero window".into()));
    }
    for ep in episodes {
        let n = ep.n_vehicles();
        if ep.steps.iter().any(|s| s.truth.len() != n || s.internal.len() != n || s.graphs.meas.len() != n) {
            return Err(Error::shape("rollout", format!("episode {} has inconsistent vehicle counts", ep.seed)));
        }
    }
    let dims = params.dims;
    let sizes: Vec<usize> = episodes.iter().map(|e| e.n_vehicles()).collect();
    let offsets: Vec<usize> = sizes.iter().scan(0, |acc, &n| Some(std::mem::replace(acc, *acc + n))).collect();
    let n_rows: usize = sizes.iter().sum();

    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let mut state = tape.constant(Tensor::zeros(&[n_rows, dims.state]));
    let mut loss: Option<Var> = None;
    let mut states = Vec::with_capacity(window);
    let mut estimates = Vec::with_capacity(window);
    let mut messages = Vec::with_capacity(window);

    for k in 0..window {
        let plan = plan_step(params, episodes, k, disable_comm, mode);

        // transmit
        let msgs = if plan.senders.is_empty() {
            messages.push(None);
            tape.constant(Tensor::zeros(&[0, dims.message]))
        } else {
            let n_msg = plan.senders.len();
            let s_rows = tape.gather_rows(state, plan.senders.iter().map(|&s| Some(s)).collect())?;
            let feat = tape.constant(Tensor::matrix(n_msg, EXT_FEAT, plan.msg_feat)?);
            let input = tape.concat_cols(&[s_rows, feat])?;
            let out = vars.mtnn.forward(&mut tape, input)?;
            messages.push(Some((out, plan.msg_pairs, plan.msg_delivered)));
            out
        };

        // receive and pool
        let pooled = if plan.receivers.is_empty() {
            tape.constant(Tensor::zeros(&[n_rows, dims.message]))
        } else {
            let n_recv = plan.receivers.len();
            let m_in = tape.gather_rows(msgs, plan.recv_msg)?;
            let feat = tape.constant(Tensor::matrix(n_recv, EXT_FEAT, plan.recv_feat)?);
            let input = tape.concat_cols(&[m_in, feat])?;
            let mut latent = vars.mrnn.forward(&mut tape, input)?;
            if mode == RolloutMode::ZeroFilled {
                latent = tape.row_scale(latent, plan.recv_mask)?;
            }
            tape.segment_sum(latent, plan.receivers, n_rows)?
        };

        // state update and estimate
        let fix = tape.constant(Tensor::matrix(n_rows, INT_FEAT, plan.internal)?);
        let gru_in = tape.concat_cols(&[pooled, fix])?;
        state = tape.gru(gru_in, state, &vars.sunn)?;
        let out = vars.lenn.forward(&mut tape, state)?;
        let scaled = tape.scale(out, params.position_scale)?;
        let origin = tape.constant(Tensor::matrix(n_rows, 2, plan.origin)?);
        let est = tape.add(scaled, origin)?;
        let step_loss = tape.weighted_dist(est, Tensor::matrix(n_rows, 2, plan.truth)?, plan.weights)?;
        loss = Some(match loss {
            Some(l) => tape.add(l, step_loss)?,
            None => step_loss,
        });
        states.push(state);
        estimates.push(est);
    }

    Ok(BatchRollout {
        tape,
        vars,
        loss: loss.expect("non-empty window"),
        offsets,
        sizes,
        states,
        estimates,
        messages,
    })
}

impl BatchRollout {
    /// Mean over episodes of each episode's mean radial error, meters.
    pub fn loss(&self) -> f64 {
        self.tape.value(self.loss).data()[0]
    }

    pub fn n_episodes(&self) -> usize {
        self.sizes.len()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Estimates of episode `e`, indexed `[t][vehicle]`.
    pub fn estimates(&self, e: usize) -> Vec<Vec<Point2>> {
        let (o, n) = (self.offsets[e], self.sizes[e]);
        self.estimates
            .iter()
            .map(|&v| {
                let t = self.tape.value(v);
                (o..o + n).map(|r| Point2::new(t.get2(r, 0), t.get2(r, 1))).collect()
            })
            .collect()
    }

    pub fn record(&self, e: usize, episode: &Episode) -> RolloutRecord {
        let (o, n) = (self.offsets[e], self.sizes[e]);
        let states = self
            .states
            .iter()
            .map(|&v| (o..o + n).map(|r| self.tape.value(v).row(r).to_vec()).collect())
            .collect();
        let messages = self
            .messages
            .iter()
            .map(|m| match m {
                None => Vec::new(),
                Some((var, pairs, delivered)) => pairs
                    .iter()
                    .zip(delivered)
                    .enumerate()
                    .filter(|(_, (p, &d))| p.0 == e && d)
                    .map(|(row, (&(_, from, to), _))| Message {
                        from,
                        to,
                        payload: self.tape.value(*var).row(row).to_vec(),
                    })
                    .collect(),
            })
            .collect();
        let estimates = self.estimates(e);
        let loss = mean_radial_error(&estimates, episode);
        RolloutRecord { states, messages, estimates, loss }
    }

    /// Gradients of [`BatchRollout::loss`] for every parameter, in
    /// [`MlclParams::named_tensors`] order. Unused parameters get zeros.
    pub fn gradients(&self) -> Result<Vec<Tensor>> {
        let grads = self.tape.backward(self.loss)?;
        Ok(self.vars.all().into_iter().map(|v| grads.get_or_zeros(v, self.tape.value(v))).collect())
    }
}

fn mean_radial_error(estimates: &[Vec<Point2>], episode: &Episode) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (est, step) in estimates.iter().zip(&episode.steps) {
        for (e, t) in est.iter().zip(&step.truth) {
            sum += e.dist(*t);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Rolls one episode forward from zero states.
pub fn rollout(params: &MlclParams, episode: &Episode, disable_comm: bool) -> Result<RolloutRecord> {
    let batch = rollout_batch(params, &[episode], disable_comm, RolloutMode::Sparse)?;
    Ok(batch.record(0, episode))
}

/// [`rollout`] computed over all vehicle pairs with zero-filled inputs.
pub fn rollout_zero_filled(params: &MlclParams, episode: &Episode, disable_comm: bool) -> Result<RolloutRecord> {
    let batch = rollout_batch(params, &[episode], disable_comm, RolloutMode::ZeroFilled)?;
    Ok(batch.record(0, episode))
}

/// Mean over all (vehicle, timestep) of the radial error of `record` against the episode truth.
pub fn loss_mae(record: &RolloutRecord, episode: &Episode) -> Result<f64> {
    if record.estimates.len() != episode.window()
        || record.estimates.iter().any(|e| e.len() != episode.n_vehicles())
    {
        return Err(Error::shape("loss_mae", "record does not match the episode".to_string()));
    }
    Ok(mean_radial_error(&record.estimates, episode))
}
