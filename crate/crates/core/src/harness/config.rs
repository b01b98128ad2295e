//! Flat `key = value` experiment configuration.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mlcl::{MlclDims, TrainConfig};
use crate::sensing::{BearingFrame, NoiseConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    Mlcl,
    Nc,
    Gcn,
    Ekf,
    Mle,
    Naive,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [Scheme::Mlcl, Scheme::Nc, Scheme::Gcn, Scheme::Ekf, Scheme::Mle, Scheme::Naive];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Mlcl => "mlcl",
            Scheme::Nc => "nc",
            Scheme::Gcn => "gcn",
            Scheme::Ekf => "ekf",
            Scheme::Mle => "mle",
            Scheme::Naive => "naive",
        }
    }

    /// Whether the scheme has trainable parameters.
    pub fn is_learned(self) -> bool {
        matches!(self, Scheme::Mlcl | Scheme::Nc | Scheme::Gcn)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    None,
    NVehicles,
    CommRange,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::None => "none",
            SweepAxis::NVehicles => "n_vehicles",
            SweepAxis::CommRange => "comm_range",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub spacing_m: f64,
    pub speed_limit_mps: f64,
    pub n_vehicles: usize,
    pub duration_s: f64,
    pub dt_s: f64,
    pub train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub noise: NoiseConfig,
    pub n_train_episodes: usize,
    pub n_test_episodes: usize,
    pub group_size: usize,
    pub window: usize,
    pub dims: MlclDims,
    pub position_scale: f64,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub ekf_accel_std: f64,
    /// Constant-velocity prior for the maximum-likelihood window; `None` disables it.
    pub mle_motion_prior: Option<f64>,
    pub mle_max_iters: usize,
    pub schemes: Vec<Scheme>,
    pub sweep_axis: SweepAxis,
    pub sweep_values: Vec<f64>,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig {
                grid_rows: 6,
                grid_cols: 6,
                spacing_m: 150.0,
                speed_limit_mps: 14.0,
                n_vehicles: 60,
                duration_s: 600.0,
                dt_s: 1.0,
                train_fraction: 0.7,
            },
            noise: NoiseConfig::default(),
            n_train_episodes: 2000,
            n_test_episodes: 60,
            group_size: 6,
            window: 20,
            dims: MlclDims::DESK,
            position_scale: 100.0,
            train: TrainConfig { lr: 8e-3, lr_floor: Some(0.01), steps: 2500, ..TrainConfig::default() },
            init_seed: 1,
            ekf_accel_std: crate::baselines::ekf::DEFAULT_ACCEL_STD,
            mle_motion_prior: None,
            mle_max_iters: 200,
            schemes: Scheme::ALL.to_vec(),
            sweep_axis: SweepAxis::None,
            sweep_values: Vec::new(),
            bootstrap_resamples: 1000,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn optional(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn show_optional(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.world;
        let n = &mut self.noise;
        let t = &mut self.train;
        match key {
            "grid_rows" => w.grid_rows = parse(key, v)?,
            "grid_cols" => w.grid_cols = parse(key, v)?,
            "spacing_m" => w.spacing_m = parse(key, v)?,
            "speed_limit_mps" => w.speed_limit_mps = parse(key, v)?,
            "n_vehicles" => w.n_vehicles = parse(key, v)?,
            "duration_s" => w.duration_s = parse(key, v)?,
            "dt_s" => w.dt_s = parse(key, v)?,
            "train_fraction" => w.train_fraction = parse(key, v)?,
            "sigma_gnss" => n.sigma_gnss = parse(key, v)?,
            "sigma_range" => n.sigma_range = parse(key, v)?,
            "sigma_bearing_deg" => n.sigma_bearing = parse::<f64>(key, v)?.to_radians(),
            "rho_meas" => n.rho_meas = parse(key, v)?,
            "rho_comm" => n.rho_comm = parse(key, v)?,
            "p_fail" => n.p_fail = parse(key, v)?,
            "bearing_frame" => {
                n.bearing_frame = match v {
                    "global" => BearingFrame::Global,
                    "ego" => BearingFrame::EgoHeading,
                    _ => return Err(Error::Config(format!("`{key}` must be `global` or `ego`"))),
                }
            }
            "n_train_episodes" => self.n_train_episodes = parse(key, v)?,
            "n_test_episodes" => self.n_test_episodes = parse(key, v)?,
            "group_size" => self.group_size = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "state_dim" => self.dims.state = parse(key, v)?,
            "message_dim" => self.dims.message = parse(key, v)?,
            "hidden" => self.dims.hidden = parse(key, v)?,
            "position_scale" => self.position_scale = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "lr_floor" => t.lr_floor = optional(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "train_steps" => t.steps = parse(key, v)?,
            "eval_every" => t.eval_every = parse(key, v)?,
            "clip_norm" => t.clip_norm = optional(key, v)?,
            "init_seed" => self.init_seed = parse(key, v)?,
            "ekf_accel_std" => self.ekf_accel_std = parse(key, v)?,
            "mle_motion_prior" => self.mle_motion_prior = optional(key, v)?,
            "mle_max_iters" => self.mle_max_iters = parse(key, v)?,
            "schemes" => self.schemes = parse_list(key, v)?,
            "sweep_axis" => {
                self.sweep_axis = match v {
                    "none" => SweepAxis::None,
                    "n_vehicles" => SweepAxis::NVehicles,
                    "comm_range" => SweepAxis::CommRange,
                    _ => return Err(Error::Config(format!("`{key}` must be none, n_vehicles or comm_range"))),
                }
            }
            "sweep_values" => self.sweep_values = parse_list(key, v)?,
            "bootstrap_resamples" => self.bootstrap_resamples = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let w = &self.world;
        if w.grid_rows < 2 || w.grid_cols < 2 || !(w.spacing_m > 0.0) || !(w.speed_limit_mps > 0.0) {
            return bad("the road grid needs at least 2x2 junctions, positive spacing and speed");
        }
        if w.n_vehicles < 2 || !(w.dt_s > 0.0) || !(w.duration_s >= w.dt_s) {
            return bad("need at least 2 vehicles and duration_s >= dt_s > 0");
        }
        if !(w.train_fraction > 0.0 && w.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.group_size == 0 || self.window == 0 || self.n_train_episodes == 0 || self.n_test_episodes == 0 {
            return bad("group_size, window and episode counts must be positive");
        }
        let d = self.dims;
        if d.state == 0 || d.message == 0 || d.hidden == 0 || !(self.position_scale > 0.0) {
            return bad("network dimensions and position_scale must be positive");
        }
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) || t.batch_size == 0 {
            return bad("lr must be finite and non-negative, batch_size positive");
        }
        if t.lr_floor.is_some_and(|f| !(0.0..=1.0).contains(&f)) || t.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("lr_floor must lie in [0, 1] and clip_norm be positive");
        }
        if !(self.ekf_accel_std >= 0.0) || self.mle_motion_prior.is_some_and(|a| !(a > 0.0)) {
            return bad("ekf_accel_std must be non-negative and mle_motion_prior positive");
        }
        if self.schemes.is_empty() {
            return bad("schemes must not be empty");
        }
        let mut sorted = self.schemes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.schemes.len() {
            return bad("schemes must not repeat");
        }
        let v = &self.sweep_values;
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || v.windows(2).any(|p| p[0] >= p[1]) {
            return bad("sweep_values must be non-negative and strictly increasing");
        }
        if self.sweep_axis == SweepAxis::NVehicles && v.iter().any(|x| *x < 1.0 || x.fract() != 0.0) {
            return bad("group-size sweep values must be positive integers");
        }
        if self.bootstrap_resamples == 0 {
            return bad("bootstrap_resamples must be positive");
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parsing it reproduces `self`.
    pub fn to_flat_string(&self) -> String {
        let w = &self.world;
        let n = &self.noise;
        let t = &self.train;
        let join = |v: Vec<String>| v.join(",");
        let entries: Vec<(&str, String)> = vec![
            ("grid_rows", w.grid_rows.to_string()),
            ("grid_cols", w.grid_cols.to_string()),
            ("spacing_m", w.spacing_m.to_string()),
            ("speed_limit_mps", w.speed_limit_mps.to_string()),
            ("n_vehicles", w.n_vehicles.to_string()),
            ("duration_s", w.duration_s.to_string()),
            ("dt_s", w.dt_s.to_string()),
            ("train_fraction", w.train_fraction.to_string()),
            ("sigma_gnss", n.sigma_gnss.to_string()),
            ("sigma_range", n.sigma_range.to_string()),
            ("sigma_bearing_deg", n.sigma_bearing.to_degrees().to_string()),
            ("rho_meas", n.rho_meas.to_string()),
            ("rho_comm", n.rho_comm.to_string()),
            ("p_fail", n.p_fail.to_string()),
            ("bearing_frame", if n.bearing_frame == BearingFrame::Global { "global" } else { "ego" }.to_string()),
            ("n_train_episodes", self.n_train_episodes.to_string()),
            ("n_test_episodes", self.n_test_episodes.to_string()),
            ("group_size", self.group_size.to_string()),
            ("window", self.window.to_string()),
            ("state_dim", self.dims.state.to_string()),
            ("message_dim", self.dims.message.to_string()),
            ("hidden", self.dims.hidden.to_string()),
            ("position_scale", self.position_scale.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_floor", show_optional(t.lr_floor)),
            ("batch_size", t.batch_size.to_string()),
            ("train_steps", t.steps.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("clip_norm", show_optional(t.clip_norm)),
            ("init_seed", self.init_seed.to_string()),
            ("ekf_accel_std", self.ekf_accel_std.to_string()),
            ("mle_motion_prior", show_optional(self.mle_motion_prior)),
            ("mle_max_iters", self.mle_max_iters.to_string()),
            ("schemes", join(self.schemes.iter().map(|s| s.to_string()).collect())),
            ("sweep_axis", self.sweep_axis.as_str().to_string()),
            ("sweep_values", join(self.sweep_values.iter().map(|v| v.to_string()).collect())),
            ("bootstrap_resamples", self.bootstrap_resamples.to_string()),
            ("seed", self.seed.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_flat_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Training settings with the master seed folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: crate::rng::derive_seed(self.seed, "train", 0), ..self.train.clone() }
    }

    pub fn has(&self, scheme: Scheme) -> bool {
        self.schemes.contains(&scheme)
    }
}
