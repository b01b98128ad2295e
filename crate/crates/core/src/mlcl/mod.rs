//! Recurrent message-passing localizer.
//!
//! Every vehicle runs the same four units:
//!
//! - MTNN turns the vehicle's previous state and its measurement of a
//!   neighbor into a message for that neighbor (communication edges only);
//! - MRNN combines an incoming message with the receiver's own measurement of
//!   the sender into a latent vector;
//! - SUNN, a GRU, updates the state from the sum-pooled latents and the
//!   internal position fix;
//! - LENN decodes the state into a position estimate.
//!
//! Missing links are handled by zero-filling the corresponding input, so a
//! single shared parameter set serves any graph topology.

mod rollout;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::tensorcore::checkpoint::Checkpoint;
use crate::tensorcore::tape::{DenseVars, GruVars, Tape};
use crate::tensorcore::{dense_forward, gru_forward, init_dense, init_gru, relu, sum_pool, AdamState, DenseLayer, GruCell, Tensor};

pub use rollout::{
    loss_mae, rollout, rollout_batch, rollout_zero_filled, BatchRollout, Message, RolloutMode, RolloutRecord,
};
pub use train::{batch_indices, evaluate, train, CurvePoint, EvalSummary, MlclModel, Model, TrainConfig, TrainOutcome};

/// Width of an encoded external measurement.
pub const EXT_FEAT: usize = 3;
/// Width of an encoded internal measurement.
pub const INT_FEAT: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlclDims {
    /// State length `d_s`.
    pub state: usize,
    /// Message and latent length `d_m`.
    pub message: usize,
    /// Hidden width of the two-layer units.
    pub hidden: usize,
}

impl MlclDims {
    pub const DESK: MlclDims = MlclDims { state: 32, message: 32, hidden: 128 };
    pub const FULL: MlclDims = MlclDims { state: 100, message: 100, hidden: 1000 };
}

impl Default for MlclDims {
    fn default() -> Self {
        Self::DESK
    }
}

/// Two dense layers with a ReLU in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub l1: DenseLayer,
    pub l2: DenseLayer,
}

impl Mlp2 {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self { l1: DenseLayer::zeros(input, hidden), l2: DenseLayer::zeros(hidden, output) }
    }

    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self { l1: init_dense(input, hidden, rng), l2: init_dense(hidden, output, rng) }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        dense_forward(&self.l2, &relu(&dense_forward(&self.l1, x)?))
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.l1.w, &self.l1.b, &self.l2.w, &self.l2.b]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.l1.w, &mut self.l1.b, &mut self.l2.w, &mut self.l2.b]
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Mlp2Vars {
    pub l1: DenseVars,
    pub l2: DenseVars,
}

impl Mlp2Vars {
    pub fn register(tape: &mut Tape, mlp: &Mlp2) -> Self {
        Self { l1: tape.register_dense(&mlp.l1), l2: tape.register_dense(&mlp.l2) }
    }

    pub fn forward(&self, tape: &mut Tape, x: crate::tensorcore::Var) -> Result<crate::tensorcore::Var> {
        let h = tape.dense(x, self.l1)?;
        let h = tape.relu(h)?;
        tape.dense(h, self.l2)
    }

    pub fn vars(&self) -> [crate::tensorcore::Var; 4] {
        [self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }
}

/// The single parameter set shared by every vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlclParams {
    pub dims: MlclDims,
    /// Meters per unit of normalized position.
    pub position_scale: f64,
    /// Point mapped to the normalized origin.
    #[serde(default)]
    pub origin: Point2,
    /// Meters per unit of encoded range.
    pub range_scale: f64,
    pub mtnn: Mlp2,
    pub mrnn: Mlp2,
    pub sunn: GruCell,
    pub lenn: Mlp2,
}

const GRU_NAMES: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];
const MLP_NAMES: [&str; 4] = ["l1.w", "l1.b", "l2.w", "l2.b"];

impl MlclParams {
    pub const DEFAULT_POSITION_SCALE: f64 = 1000.0;

    pub fn zeros(dims: MlclDims, position_scale: f64, range_scale: f64) -> Self {
        let MlclDims { state, message, hidden } = dims;
        Self {
            dims,
            position_scale,
            origin: Point2::ZERO,
            range_scale,
            mtnn: Mlp2::zeros(state + EXT_FEAT, hidden, message),
            mrnn: Mlp2::zeros(message + EXT_FEAT, hidden, message),
            sunn: GruCell::zeros(message + INT_FEAT, state),
            lenn: Mlp2::zeros(state, hidden, 2),
        }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init<R: Rng>(dims: MlclDims, position_scale: f64, range_scale: f64, rng: &mut R) -> Self {
        let MlclDims { state, message, hidden } = dims;
        Self {
            dims,
            position_scale,
            origin: Point2::ZERO,
            range_scale,
            mtnn: Mlp2::init(state + EXT_FEAT, hidden, message, rng),
            mrnn: Mlp2::init(message + EXT_FEAT, hidden, message, rng),
            sunn: init_gru(message + INT_FEAT, state, rng),
            lenn: Mlp2::init(state, hidden, 2, rng),
        }
    }

    pub fn with_origin(mut self, origin: Point2) -> Self {
        self.origin = origin;
        self
    }

    /// Network input encoding of a position in meters.
    pub fn normalize(&self, p: Point2) -> [f64; 2] {
        [(p.x - self.origin.x) / self.position_scale, (p.y - self.origin.y) / self.position_scale]
    }

    /// Inverse of [`MlclParams::normalize`].
    pub fn denormalize(&self, out: &[f64]) -> Point2 {
        Point2::new(out[0] * self.position_scale + self.origin.x, out[1] * self.position_scale + self.origin.y)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (unit, mlp) in [("mtnn", &self.mtnn), ("mrnn", &self.mrnn)] {
            out.extend(MLP_NAMES.iter().zip(mlp.tensors()).map(|(n, t)| (format!("{unit}.{n}"), t)));
        }
        out.extend(GRU_NAMES.iter().zip(self.sunn.tensors()).map(|(n, t)| (format!("sunn.{n}"), t)));
        out.extend(MLP_NAMES.iter().zip(self.lenn.tensors()).map(|(n, t)| (format!("lenn.{n}"), t)));
        out
    }

    /// Mutable tensors in the order of [`MlclParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.mtnn.tensors_mut());
        out.extend(self.mrnn.tensors_mut());
        out.extend(self.sunn.tensors_mut());
        out.extend(self.lenn.tensors_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value, adam: Option<&AdamState>) -> Checkpoint {
        let mut full = serde_json::json!({
            "kind": "mlcl",
            "dims": self.dims,
            "position_scale": self.position_scale,
            "origin": [self.origin.x, self.origin.y],
            "range_scale": self.range_scale,
        });
        if let (Some(obj), serde_json::Value::Object(extra)) = (full.as_object_mut(), meta) {
            obj.extend(extra);
        }
        let mut ck = Checkpoint::new(full);
        let named = self.named_tensors();
        for (name, t) in &named {
            ck.push(name.clone(), t);
        }
        if let Some(adam) = adam {
            write_adam(&mut ck, adam, named.iter().map(|(n, _)| n.as_str()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<AdamState>)> {
        let meta = &ck.meta;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("mlcl") {
            return Err(Error::Checkpoint("not an mlcl checkpoint".into()));
        }
        let dims: MlclDims = serde_json::from_value(meta["dims"].clone())?;
        let scale = |k: &str| {
            meta.get(k).and_then(|v| v.as_f64()).ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")))
        };
        let mut params = Self::zeros(dims, scale("position_scale")?, scale("range_scale")?);
        params.origin = read_origin(meta)?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = ck.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        let adam = read_adam(ck, names.iter().map(String::as_str))?;
        Ok((params, adam))
    }

    fn check_dims(&self) -> Result<()> {
        let MlclDims { state, message, .. } = self.dims;
        let ok = self.mtnn.l1.input_dim() == state + EXT_FEAT
            && self.mtnn.l2.output_dim() == message
            && self.mrnn.l1.input_dim() == message + EXT_FEAT
            && self.mrnn.l2.output_dim() == message
            && self.sunn.input_dim() == message + INT_FEAT
            && self.sunn.hidden_dim() == state
            && self.lenn.l1.input_dim() == state
            && self.lenn.l2.output_dim() == 2;
        if ok {
            Ok(())
        } else {
            Err(Error::shape("mlcl", format!("parameters inconsistent with dims {:?}", self.dims)))
        }
    }
}

pub(crate) fn read_origin(meta: &serde_json::Value) -> Result<Point2> {
    match meta.get("origin") {
        None => Ok(Point2::ZERO),
        Some(v) => {
            let [x, y]: [f64; 2] = serde_json::from_value(v.clone())?;
            Ok(Point2::new(x, y))
        }
    }
}

pub(crate) fn write_adam<'a>(ck: &mut Checkpoint, adam: &AdamState, names: impl Iterator<Item = &'a str>) {
    if let Some(obj) = ck.meta.as_object_mut() {
        obj.insert(
            "adam".into(),
            serde_json::json!({"step": adam.step, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}),
        );
    }
    for ((name, m), v) in names.zip(&adam.m).zip(&adam.v) {
        ck.push(format!("adam.m.{name}"), m);
        ck.push(format!("adam.v.{name}"), v);
    }
}

pub(crate) fn read_adam<'a>(ck: &Checkpoint, names: impl Iterator<Item = &'a str>) -> Result<Option<AdamState>> {
    let Some(a) = ck.meta.get("adam") else { return Ok(None) };
    let num = |k: &str| a.get(k).and_then(|v| v.as_f64()).ok_or_else(|| Error::Checkpoint(format!("adam.{k}")));
    let mut m = Vec::new();
    let mut v = Vec::new();
    for name in names {
        m.push(ck.get(&format!("adam.m.{name}"))?);
        v.push(ck.get(&format!("adam.v.{name}"))?);
    }
    Ok(Some(AdamState {
        step: a.get("step").and_then(|s| s.as_u64()).ok_or_else(|| Error::Checkpoint("adam.step".into()))?,
        lr: num("lr")?,
        beta1: num("beta1")?,
        beta2: num("beta2")?,
        eps: num("eps")?,
        m,
        v,
    }))
}

/// Registered tape variables of all four units.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ParamVars {
    pub mtnn: Mlp2Vars,
    pub mrnn: Mlp2Vars,
    pub sunn: GruVars,
    pub lenn: Mlp2Vars,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, p: &MlclParams) -> Self {
        Self {
            mtnn: Mlp2Vars::register(tape, &p.mtnn),
            mrnn: Mlp2Vars::register(tape, &p.mrnn),
            sunn: tape.register_gru(&p.sunn),
            lenn: Mlp2Vars::register(tape, &p.lenn),
        }
    }

    /// Variables in the order of [`MlclParams::named_tensors`].
    pub fn all(&self) -> Vec<crate::tensorcore::Var> {
        let s = &self.sunn;
        let mut out = Vec::new();
        out.extend(self.mtnn.vars());
        out.extend(self.mrnn.vars());
        out.extend([s.w_z, s.w_r, s.w_h, s.u_z, s.u_r, s.u_h, s.b_z, s.b_r, s.b_h]);
        out.extend(self.lenn.vars());
        out
    }
}

fn feat_or_zero(e: Option<[f64; 3]>) -> [f64; 3] {
    e.unwrap_or([0.0; 3])
}

/// Message from a vehicle with previous state `s_prev` to a neighbor it
/// measured as `e_feat` (`None` when there is no measurement edge).
pub fn mtnn_forward(params: &MlclParams, s_prev: &[f64], e_feat: Option<[f64; 3]>) -> Result<Vec<f64>> {
    let mut x = s_prev.to_vec();
    x.extend(feat_or_zero(e_feat));
    params.mtnn.forward(&x)
}

/// Latent for one neighbor from its message (`None` without a communication
/// edge) and the receiver's measurement of it (`None` without a measurement edge).
pub fn mrnn_forward(params: &MlclParams, m_in: Option<&[f64]>, e_feat: Option<[f64; 3]>) -> Result<Vec<f64>> {
    let mut x = match m_in {
        Some(m) => m.to_vec(),
        None => vec![0.0; params.dims.message],
    };
    x.extend(feat_or_zero(e_feat));
    params.mrnn.forward(&x)
}

/// New state from the neighbor latents and the normalized internal fix.
pub fn aggregate_and_update(params: &MlclParams, latents: &[Vec<f64>], i_feat: [f64; 2], s_prev: &[f64]) -> Result<Vec<f64>> {
    let mut x = sum_pool(latents, params.dims.message)?;
    x.extend(i_feat);
    gru_forward(&params.sunn, &x, s_prev)
}

/// Position estimate in meters.
pub fn lenn_forward(params: &MlclParams, state: &[f64]) -> Result<Point2> {
    Ok(params.denormalize(&params.lenn.forward(state)?))
}
