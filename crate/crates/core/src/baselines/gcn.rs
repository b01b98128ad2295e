//! Two-layer graph convolution baseline without temporal state.
//!
//! Layer one aggregates over the measurement graph, layer two over the
//! communication graph, each with the normalized adjacency
//! `D^-1/2 (A + I) D^-1/2`. The head decodes `H2 ‖ X`, the aggregated
//! features next to the node's own inputs; on a complete graph the two
//! convolutions give every node the same row, and without `X` all vehicles
//! of a group would share one estimate. Every timestep is estimated
//! independently.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::mlcl::{Mlp2, Model, EXT_FEAT, INT_FEAT};
use crate::sensing::{encode_external_scaled, Adjacency, Episode, EpisodeStep};
use crate::tensorcore::checkpoint::Checkpoint;
use crate::tensorcore::{glorot_uniform, Tape, Tensor, Var};

/// Width of a node feature: internal fix plus pooled external encodings.
pub const NODE_FEAT: usize = INT_FEAT + EXT_FEAT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub hidden: usize,
    pub position_scale: f64,
    #[serde(default)]
    pub origin: Point2,
    pub range_scale: f64,
    /// `hidden x NODE_FEAT`.
    pub w1: Tensor,
    /// `hidden x hidden`.
    pub w2: Tensor,
    pub head: Mlp2,
}

const NAMES: [&str; 6] = ["w1", "w2", "head.l1.w", "head.l1.b", "head.l2.w", "head.l2.b"];

impl GcnParams {
    pub fn init<R: Rng>(hidden: usize, position_scale: f64, range_scale: f64, rng: &mut R) -> Self {
        Self {
            hidden,
            position_scale,
            origin: Point2::ZERO,
            range_scale,
            w1: glorot_uniform(hidden, NODE_FEAT, rng),
            w2: glorot_uniform(hidden, hidden, rng),
            head: Mlp2::init(hidden + NODE_FEAT, hidden, 2, rng),
        }
    }

    pub fn with_origin(mut self, origin: Point2) -> Self {
        self.origin = origin;
        self
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.w2, &self.head.l1.w, &self.head.l1.b, &self.head.l2.w, &self.head.l2.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let h = &mut self.head;
        vec![&mut self.w1, &mut self.w2, &mut h.l1.w, &mut h.l1.b, &mut h.l2.w, &mut h.l2.b]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        NAMES.iter().map(|n| n.to_string()).zip(self.tensors()).collect()
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value, adam: Option<&crate::tensorcore::AdamState>) -> Checkpoint {
        let mut full = serde_json::json!({
            "kind": "gcn",
            "hidden": self.hidden,
            "position_scale": self.position_scale,
            "origin": [self.origin.x, self.origin.y],
            "range_scale": self.range_scale,
        });
        if let (Some(obj), serde_json::Value::Object(extra)) = (full.as_object_mut(), meta) {
            obj.extend(extra);
        }
        let mut ck = Checkpoint::new(full);
        for (name, t) in self.named_tensors() {
            ck.push(name, t);
        }
        if let Some(adam) = adam {
            crate::mlcl::write_adam(&mut ck, adam, NAMES.into_iter());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<crate::tensorcore::AdamState>)> {
        let meta = &ck.meta;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("gcn") {
            return Err(Error::Checkpoint("not a gcn checkpoint".into()));
        }
        let num = |k: &str| meta.get(k).and_then(|v| v.as_f64()).ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")));
        let hidden = num("hidden")? as usize;
        let mut p = Self::init(hidden, num("position_scale")?, num("range_scale")?, &mut crate::rng::from_seed(0));
        p.origin = crate::mlcl::read_origin(meta)?;
        for (name, slot) in NAMES.iter().zip(p.tensors_mut()) {
            let t = ck.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        let adam = crate::mlcl::read_adam(ck, NAMES.into_iter())?;
        Ok((p, adam))
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden;
        let ok = self.w1.shape() == [h, NODE_FEAT]
            && self.w2.shape() == [h, h]
            && self.head.l1.input_dim() == h + NODE_FEAT
            && self.head.l2.output_dim() == 2;
        if ok {
            Ok(())
        } else {
            Err(Error::shape("gcn", format!("parameters inconsistent with hidden width {h}")))
        }
    }
}

/// Node features of one step: the normalized internal fix and the sum of the
/// vehicle's encoded measurements of its neighbors.
pub fn node_features(params: &GcnParams, step: &EpisodeStep) -> Vec<[f64; NODE_FEAT]> {
    let mut out: Vec<[f64; NODE_FEAT]> = step
        .internal
        .iter()
        .map(|p| {
            let [x, y] = [(p.x - params.origin.x) / params.position_scale, (p.y - params.origin.y) / params.position_scale];
            [x, y, 0.0, 0.0, 0.0]
        })
        .collect();
    for m in &step.external {
        let e = encode_external_scaled(m, params.range_scale);
        for (o, v) in out[m.observer][INT_FEAT..].iter_mut().zip(e) {
            *o += v;
        }
    }
    out
}

/// Entries `(row, col, weight)` of `D^-1/2 (A + I) D^-1/2`, shifted by `offset`.
pub fn normalized_adjacency(adj: &Adjacency, offset: usize) -> Vec<(usize, usize, f64)> {
    let n = adj.len();
    let deg: Vec<f64> = (0..n).map(|a| 1.0 + adj.neighbors(a).count() as f64).collect();
    let mut out = Vec::new();
    for a in 0..n {
        let mut cols: Vec<usize> = adj.neighbors(a).collect();
        cols.push(a);
        cols.sort_unstable();
        for b in cols {
            out.push((offset + a, offset + b, 1.0 / (deg[a] * deg[b]).sqrt()));
        }
    }
    out
}

struct GcnPass {
    tape: Tape,
    vars: [Var; 6],
    loss: Var,
    est: Var,
    /// Row of the first vehicle of episode `e` at step 0; rows run `[step][vehicle]` within an episode.
    offsets: Vec<usize>,
}

fn gcn_pass(params: &GcnParams, episodes: &[&Episode]) -> Result<GcnPass> {
    params.check()?;
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("gcn needs at least one episode".into()));
    }
    let mut feat = Vec::new();
    let mut a_meas = Vec::new();
    let mut a_comm = Vec::new();
    let mut truth = Vec::new();
    let mut origin = Vec::new();
    let mut weights = Vec::new();
    let mut offsets = Vec::new();
    let mut row = 0;
    let n_eps = episodes.len() as f64;
    for ep in episodes {
        offsets.push(row);
        let n = ep.n_vehicles();
        let w = 1.0 / (n_eps * n as f64 * ep.window() as f64);
        for step in &ep.steps {
            if step.internal.len() != n || step.graphs.meas.len() != n {
                return Err(Error::shape("gcn", format!("episode {} has inconsistent vehicle counts", ep.seed)));
            }
            feat.extend(node_features(params, step).into_iter().flatten());
            a_meas.extend(normalized_adjacency(&step.graphs.meas, row));
            a_comm.extend(normalized_adjacency(&step.graphs.comm, row));
            truth.extend(step.truth.iter().flat_map(|p| [p.x, p.y]));
            origin.extend(std::iter::repeat_n([params.origin.x, params.origin.y], n).flatten());
            weights.extend(std::iter::repeat_n(w, n));
            row += n;
        }
    }
    let mut tape = Tape::new();
    let vars: [Var; 6] = std::array::from_fn(|i| tape.leaf(params.tensors()[i].clone()));
    let x = tape.constant(Tensor::matrix(row, NODE_FEAT, feat)?);
    let xw = tape.linear(x, vars[0], None)?;
    let h1 = tape.propagate(xw, a_meas, row)?;
    let h1 = tape.relu(h1)?;
    let hw = tape.linear(h1, vars[1], None)?;
    let h2 = tape.propagate(hw, a_comm, row)?;
    let h2 = tape.relu(h2)?;
    let h2x = tape.concat_cols(&[h2, x])?;
    let z = tape.linear(h2x, vars[2], Some(vars[3]))?;
    let z = tape.relu(z)?;
    let out = tape.linear(z, vars[4], Some(vars[5]))?;
    let scaled = tape.scale(out, params.position_scale)?;
    let origin = tape.constant(Tensor::matrix(row, 2, origin)?);
    let est = tape.add(scaled, origin)?;
    let loss = tape.weighted_dist(est, Tensor::matrix(row, 2, truth)?, weights)?;
    Ok(GcnPass { tape, vars, loss, est, offsets })
}

/// Estimates for a single step.
pub fn gcn_forward(params: &GcnParams, step: &EpisodeStep) -> Result<Vec<Point2>> {
    let ep = Episode { seed: 0, vehicle_ids: vec![0; step.truth.len()], start: 0, dt: 1.0, steps: vec![step.clone()] };
    Ok(GcnModel { params: params.clone() }.estimate(&[&ep])?.remove(0).remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnModel {
    pub params: GcnParams,
}

impl Model for GcnModel {
    fn parameters(&self) -> Vec<&Tensor> {
        self.params.tensors().to_vec()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.tensors_mut()
    }

    fn loss_and_grads(&self, batch: &[&Episode]) -> Result<(f64, Vec<Tensor>)> {
        let pass = gcn_pass(&self.params, batch)?;
        let grads = pass.tape.backward(pass.loss)?;
        let g = pass.vars.iter().map(|&v| grads.get_or_zeros(v, pass.tape.value(v))).collect();
        Ok((pass.tape.value(pass.loss).data()[0], g))
    }

    fn estimate(&self, batch: &[&Episode]) -> Result<Vec<Vec<Vec<Point2>>>> {
        let pass = gcn_pass(&self.params, batch)?;
        let est = pass.tape.value(pass.est);
        Ok(batch
            .iter()
            .zip(&pass.offsets)
            .map(|(ep, &o)| {
                let n = ep.n_vehicles();
                (0..ep.window())
                    .map(|k| (0..n).map(|a| Point2::new(est.get2(o + k * n + a, 0), est.get2(o + k * n + a, 1))).collect())
                    .collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlcl::{train, TrainConfig};
    use crate::rng;
    use crate::sensing::{make_episode, NoiseConfig};
    use crate::tensorcore::{dense_forward, relu};
    use crate::world::{generate_grid_network, simulate_traces};

    fn params(seed: u64) -> GcnParams {
        GcnParams::init(6, 1000.0, 500.0, &mut rng::from_seed(seed)).with_origin(Point2::new(200.0, 150.0))
    }

    fn episode(group: usize, seed: u64) -> Episode {
        let net = generate_grid_network(4, 4, 150.0, 14.0).unwrap();
        let t = simulate_traces(&net, 20, 60.0, 1.0, 3).unwrap();
        make_episode(&t, group, 4, &NoiseConfig::default(), seed).unwrap()
    }

    fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
        let (r, c) = w.dims2();
        (0..r).map(|i| (0..c).map(|j| w.get2(i, j) * x[j]).sum()).collect()
    }

    /// Loop-based oracle for one step.
    fn oracle(p: &GcnParams, step: &EpisodeStep) -> Vec<Point2> {
        let n = step.truth.len();
        let x = node_features(p, step);
        let agg = |adj: &Adjacency, rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let deg = |a: usize| 1.0 + (0..n).filter(|&b| adj.get(a, b)).count() as f64;
            (0..n)
                .map(|a| {
                    let mut acc = vec![0.0; rows[0].len()];
                    for b in 0..n {
                        if a == b || adj.get(a, b) {
                            let w = 1.0 / (deg(a) * deg(b)).sqrt();
                            acc.iter_mut().zip(&rows[b]).for_each(|(o, v)| *o += w * v);
                        }
                    }
                    relu(&acc)
                })
                .collect()
        };
        let xw: Vec<Vec<f64>> = x.iter().map(|r| mat_vec(&p.w1, r)).collect();
        let h1 = agg(&step.graphs.meas, &xw);
        let hw: Vec<Vec<f64>> = h1.iter().map(|r| mat_vec(&p.w2, r)).collect();
        let h2 = agg(&step.graphs.comm, &hw);
        h2.iter()
            .zip(&x)
            .map(|(h, xi)| {
                let input: Vec<f64> = h.iter().chain(xi.iter()).copied().collect();
                let o = p.head.forward(&input).unwrap();
                Point2::new(o[0] * p.position_scale + p.origin.x, o[1] * p.position_scale + p.origin.y)
            })
            .collect()
    }

    #[test]
    fn matches_loop_oracle() {
        let ep = episode(6, 1);
        let p = params(1);
        for step in &ep.steps {
            let got = gcn_forward(&p, step).unwrap();
            for (a, b) in got.iter().zip(oracle(&p, step)) {
                assert!((a.x - b.x).abs() < 1e-12 * 1000.0 && (a.y - b.y).abs() < 1e-12 * 1000.0, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn isolated_vehicle_is_a_plain_mlp() {
        let ep = episode(1, 2);
        let p = params(2);
        let step = &ep.steps[0];
        let x = node_features(&p, step)[0];
        let h1 = relu(&mat_vec(&p.w1, &x));
        let h2 = relu(&mat_vec(&p.w2, &h1));
        let input: Vec<f64> = h2.iter().chain(x.iter()).copied().collect();
        let z = relu(&dense_forward(&p.head.l1, &input).unwrap());
        let o = dense_forward(&p.head.l2, &z).unwrap();
        let got = gcn_forward(&p, step).unwrap()[0];
        assert!((got.x - o[0] * 1000.0 - 200.0).abs() < 1e-9 && (got.y - o[1] * 1000.0 - 150.0).abs() < 1e-9);
    }

    #[test]
    fn relabeling_permutes_outputs() {
        let ep = episode(5, 3);
        let perm = [2, 4, 0, 1, 3];
        let q = ep.permuted(&perm).unwrap();
        let p = params(3);
        for (s, t) in ep.steps.iter().zip(&q.steps) {
            let a = gcn_forward(&p, s).unwrap();
            let b = gcn_forward(&p, t).unwrap();
            for i in 0..5 {
                assert!(a[i].dist(b[perm[i]]) < 1e-9);
            }
        }
    }

    #[test]
    fn training_rules() {
        let eps: Vec<Episode> = (0..3).map(|s| episode(4, 10 + s)).collect();
        let refs: Vec<&Episode> = eps.iter().collect();
        let mut m = GcnModel { params: params(4) };
        let before = m.clone();
        let cfg = TrainConfig { lr: 0.0, batch_size: 3, steps: 2, eval_every: 0, ..TrainConfig::default() };
        train(&mut m, &eps, &[], &cfg, None).unwrap();
        assert_eq!(m, before);
        let (l0, _) = m.loss_and_grads(&refs).unwrap();
        train(&mut m, &eps, &[], &TrainConfig { lr: 1e-5, steps: 1, ..cfg }, None).unwrap();
        let (l1, _) = m.loss_and_grads(&refs).unwrap();
        assert!(l1 < l0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let eps: Vec<Episode> = (0..2).map(|s| episode(4, 20 + s)).collect();
        let refs: Vec<&Episode> = eps.iter().collect();
        let m = GcnModel { params: params(6) };
        let (_, grads) = m.loss_and_grads(&refs).unwrap();
        let h = 1e-6;
        for (k, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = m.clone();
                plus.parameters_mut()[k].data_mut()[j] += h;
                let mut minus = m.clone();
                minus.parameters_mut()[k].data_mut()[j] -= h;
                let fd = (plus.loss_and_grads(&refs).unwrap().0 - minus.loss_and_grads(&refs).unwrap().0) / (2.0 * h);
                let a = g.data()[j];
                assert!((a - fd).abs() <= 1e-5 * (1.0 + a.abs().max(fd.abs())), "tensor {k} entry {j}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = params(5);
        let ck = p.to_checkpoint(serde_json::json!({}), None);
        let (back, adam) = GcnParams::from_checkpoint(&ck).unwrap();
        assert_eq!(back, p);
        assert!(adam.is_none());
    }
}
