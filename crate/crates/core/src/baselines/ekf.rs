//! Centralized extended Kalman filter over all vehicles of an episode.
//!
//! State layout: vehicle `i` owns entries `4i..4i+4` as `(x, y, vx, vy)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point2};
use crate::sensing::{BearingFrame, Episode, ExternalMeasurement, NoiseConfig};

pub const DEFAULT_ACCEL_STD: f64 = 1.0;
/// Initial velocity variance, (m/s)^2.
pub const INIT_VEL_VAR: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EkfState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// White-acceleration process noise std, m/s^2.
    pub accel_std: f64,
}

impl EkfState {
    /// Positions at the given fixes with variance `pos_var`, zero velocity with [`INIT_VEL_VAR`].
    pub fn init(positions: &[Point2], pos_var: f64, accel_std: f64) -> Self {
        let n = positions.len();
        let mut mean = DVector::zeros(4 * n);
        let mut cov = DMatrix::zeros(4 * n, 4 * n);
        for (i, p) in positions.iter().enumerate() {
            mean[4 * i] = p.x;
            mean[4 * i + 1] = p.y;
            for (k, var) in [pos_var, pos_var, INIT_VEL_VAR, INIT_VEL_VAR].into_iter().enumerate() {
                cov[(4 * i + k, 4 * i + k)] = var;
            }
        }
        Self { mean, cov, accel_std }
    }

    pub fn n_vehicles(&self) -> usize {
        self.mean.len() / 4
    }

    pub fn position(&self, i: usize) -> Point2 {
        Point2::new(self.mean[4 * i], self.mean[4 * i + 1])
    }

    pub fn positions(&self) -> Vec<Point2> {
        (0..self.n_vehicles()).map(|i| self.position(i)).collect()
    }

    /// Largest `|P - P^T|` entry.
    pub fn asymmetry(&self) -> f64 {
        (&self.cov - self.cov.transpose()).amax()
    }
}

/// Constant-velocity transition with white-acceleration noise.
pub fn ekf_predict(state: &EkfState, dt: f64) -> EkfState {
    let n4 = state.mean.len();
    let mut f = DMatrix::identity(n4, n4);
    let mut q = DMatrix::zeros(n4, n4);
    let qa = state.accel_std * state.accel_std;
    for i in 0..n4 / 4 {
        for axis in 0..2 {
            let p = 4 * i + axis;
            let v = p + 2;
            f[(p, v)] = dt;
            q[(p, p)] = qa * dt.powi(4) / 4.0;
            q[(p, v)] = qa * dt.powi(3) / 2.0;
            q[(v, p)] = qa * dt.powi(3) / 2.0;
            q[(v, v)] = qa * dt * dt;
        }
    }
    let mean = &f * &state.mean;
    let mut cov = &f * &state.cov * f.transpose() + q;
    symmetrize(&mut cov);
    EkfState { mean, cov, accel_std: state.accel_std }
}

/// Range and bearing from `a` to `b` and their gradients with respect to
/// `(a.x, a.y, b.x, b.y)`.
pub fn range_bearing_jacobian(a: Point2, b: Point2) -> (f64, f64, [f64; 4], [f64; 4]) {
    let d = b - a;
    let r2 = d.x * d.x + d.y * d.y;
    let r = r2.sqrt();
    let dr = [-d.x / r, -d.y / r, d.x / r, d.y / r];
    let db = [d.y / r2, -d.x / r2, -d.y / r2, d.x / r2];
    (r, d.y.atan2(d.x), dr, db)
}

/// Joint update with one internal fix per vehicle (`None` to skip) and any
/// number of range/bearing measurements.
pub fn ekf_update(
    state: &EkfState,
    internal: &[Option<Point2>],
    external: &[ExternalMeasurement],
    cfg: &NoiseConfig,
) -> Result<EkfState> {
    let n = state.n_vehicles();
    if internal.len() != n {
        return Err(Error::shape("ekf_update", format!("{} fixes for {n} vehicles", internal.len())));
    }
    if external.iter().any(|m| m.observer >= n || m.subject >= n || m.observer == m.subject) {
        return Err(Error::InvalidArgument("external measurement refers to an unknown vehicle pair".into()));
    }
    if !external.is_empty() && cfg.bearing_frame != BearingFrame::Global {
        return Err(Error::InvalidArgument("the EKF needs bearings in the global frame".into()));
    }
    let n_fix = internal.iter().flatten().count();
    let m = 2 * n_fix + 2 * external.len();
    if m == 0 {
        return Ok(state.clone());
    }
    let n4 = 4 * n;
    let mut h = DMatrix::zeros(m, n4);
    let mut innov = DVector::zeros(m);
    let mut r = DVector::zeros(m);
    let mut row = 0;
    for (i, fix) in internal.iter().enumerate() {
        if let Some(z) = fix {
            let p = state.position(i);
            for (axis, (zv, pv)) in [(z.x, p.x), (z.y, p.y)].into_iter().enumerate() {
                h[(row, 4 * i + axis)] = 1.0;
                innov[row] = zv - pv;
                r[row] = cfg.sigma_gnss * cfg.sigma_gnss;
                row += 1;
            }
        }
    }
    for meas in external {
        let (a, b) = (meas.observer, meas.subject);
        let (range, bearing, dr, db) = range_bearing_jacobian(state.position(a), state.position(b));
        if !(range > 0.0) {
            return Err(Error::Numeric(format!("vehicles {a} and {b} coincide in the EKF mean")));
        }
        let cols = [4 * a, 4 * a + 1, 4 * b, 4 * b + 1];
        for k in 0..4 {
            h[(row, cols[k])] = dr[k];
            h[(row + 1, cols[k])] = db[k];
        }
        innov[row] = meas.range_meas - range;
        innov[row + 1] = wrap_angle(meas.bearing_meas - bearing);
        r[row] = cfg.sigma_range * cfg.sigma_range;
        r[row + 1] = cfg.sigma_bearing * cfg.sigma_bearing;
        row += 2;
    }
    if innov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite innovation: {:?}", innov.as_slice())));
    }
    let ph_t = &state.cov * h.transpose();
    let mut s = &h * &ph_t;
    for k in 0..m {
        s[(k, k)] += r[k];
    }
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Numeric("innovation covariance is not positive definite".into()))?;
    // K = P H^T S^-1, computed as (S^-1 H P)^T
    let gain = chol.solve(&ph_t.transpose()).transpose();
    let mean = &state.mean + &gain * innov;
    let i_kh = DMatrix::identity(n4, n4) - &gain * &h;
    let mut cov = &i_kh * &state.cov * i_kh.transpose() + &gain * DMatrix::from_diagonal(&r) * gain.transpose();
    symmetrize(&mut cov);
    if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("EKF update produced non-finite values".into()));
    }
    Ok(EkfState { mean, cov, accel_std: state.accel_std })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Filters a whole episode causally; returns posterior positions `[t][vehicle]`.
///
/// The filter starts at the first internal fixes and then absorbs that
/// step's external measurements; later steps predict and update with both.
pub fn ekf_run(episode: &Episode, cfg: &NoiseConfig, accel_std: f64) -> Result<Vec<Vec<Point2>>> {
    let mut out = Vec::with_capacity(episode.window());
    let mut state: Option<EkfState> = None;
    for step in &episode.steps {
        let next = match &state {
            None => {
                let s0 = EkfState::init(&step.internal, cfg.sigma_gnss * cfg.sigma_gnss, accel_std);
                ekf_update(&s0, &vec![None; step.internal.len()], &step.external, cfg)?
            }
            Some(s) => {
                let fixes: Vec<Option<Point2>> = step.internal.iter().copied().map(Some).collect();
                ekf_update(&ekf_predict(s, episode.dt), &fixes, &step.external, cfg)?
            }
        };
        out.push(next.positions());
        state = Some(next);
    }
    Ok(out)
}
