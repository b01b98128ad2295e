//! Windowed centralized maximum likelihood solved with Levenberg-Marquardt.
//!
//! Decision variables are all positions of the window, vehicle `i` at step `k`
//! stored at `2 (k n + i)`. The cost is half the sum of squared whitened
//! residuals.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point2};
use crate::sensing::{BearingFrame, Episode, NoiseConfig};

use super::ekf::range_bearing_jacobian;

#[derive(Clone, Debug, PartialEq)]
pub struct MleOptions {
    pub max_iters: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
    pub lambda_init: f64,
    /// Give up when the damping exceeds this.
    pub lambda_max: f64,
    /// Add a constant-velocity smoothness term with this acceleration std (m/s^2).
    pub motion_prior: Option<f64>,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self { max_iters: 200, rel_tol: 1e-10, lambda_init: 1e-3, lambda_max: 1e12, motion_prior: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MleSolution {
    /// Positions `[t][vehicle]`.
    pub positions: Vec<Vec<Point2>>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the damping cap was hit before convergence.
    pub warning: Option<String>,
}

/// One whitened residual and its nonzero Jacobian entries.
struct Residual {
    value: f64,
    grad: [(usize, f64); 4],
    len: usize,
}

fn var_index(n: usize, k: usize, i: usize) -> usize {
    2 * (k * n + i)
}

fn point(x: &DVector<f64>, n: usize, k: usize, i: usize) -> Point2 {
    let j = var_index(n, k, i);
    Point2::new(x[j], x[j + 1])
}

/// The stacked weighted residuals of one episode.
pub struct MleProblem<'a> {
    episode: &'a Episode,
    cfg: &'a NoiseConfig,
    motion_prior: Option<f64>,
}

impl<'a> MleProblem<'a> {
    pub fn new(episode: &'a Episode, cfg: &'a NoiseConfig, motion_prior: Option<f64>) -> Result<Self> {
        if episode.external_count() > 0 && cfg.bearing_frame != BearingFrame::Global {
            return Err(Error::InvalidArgument("maximum likelihood needs bearings in the global frame".into()));
        }
        let positive = |s: f64| s > 0.0 && s.is_finite();
        let has_ext = episode.external_count() > 0;
        if !positive(cfg.sigma_gnss) || (has_ext && !(positive(cfg.sigma_range) && positive(cfg.sigma_bearing))) {
            return Err(Error::InvalidArgument("maximum likelihood needs positive noise stds".into()));
        }
        if motion_prior.is_some_and(|a| !positive(a)) {
            return Err(Error::InvalidArgument("motion prior std must be positive".into()));
        }
        Ok(Self { episode, cfg, motion_prior })
    }

    pub fn n_vars(&self) -> usize {
        2 * self.episode.n_vehicles() * self.episode.window()
    }

    /// `2 N T` GNSS terms plus two per directed external measurement (plus prior terms).
    pub fn n_residuals(&self) -> usize {
        let n = self.episode.n_vehicles();
        let t = self.episode.window();
        let prior = if self.motion_prior.is_some() { 2 * n * t.saturating_sub(2) } else { 0 };
        2 * n * t + 2 * self.episode.external_count() + prior
    }

    /// The internal fixes, stacked.
    pub fn initial_guess(&self) -> DVector<f64> {
        let n = self.episode.n_vehicles();
        let mut x = DVector::zeros(self.n_vars());
        for (k, step) in self.episode.steps.iter().enumerate() {
            for (i, z) in step.internal.iter().enumerate() {
                let j = var_index(n, k, i);
                x[j] = z.x;
                x[j + 1] = z.y;
            }
        }
        x
    }

    /// Solution of the linear problem obtained by replacing each range/bearing
    /// pair with the displacement `r (cos b, sin b)` it implies, with isotropic
    /// variance `sigma_range^2 + (r sigma_bearing)^2`. Starting LM here avoids
    /// the bearing-wrap basins that noisy fixes of nearby vehicles fall into.
    pub fn linearized_guess(&self) -> Result<DVector<f64>> {
        let n = self.episode.n_vehicles();
        let nv = self.n_vars();
        let mut h = DMatrix::zeros(nv, nv);
        let mut g = DVector::zeros(nv);
        let wg = self.cfg.sigma_gnss.powi(-2);
        for (k, step) in self.episode.steps.iter().enumerate() {
            for (i, z) in step.internal.iter().enumerate() {
                let j = var_index(n, k, i);
                h[(j, j)] += wg;
                h[(j + 1, j + 1)] += wg;
                g[j] += wg * z.x;
                g[j + 1] += wg * z.y;
            }
            for m in &step.external {
                let (ja, jb) = (var_index(n, k, m.observer), var_index(n, k, m.subject));
                let w = 1.0 / (self.cfg.sigma_range.powi(2) + (m.range_meas * self.cfg.sigma_bearing).powi(2));
                let d = [m.range_meas * m.bearing_meas.cos(), m.range_meas * m.bearing_meas.sin()];
                for axis in 0..2 {
                    let (a, b) = (ja + axis, jb + axis);
                    h[(a, a)] += w;
                    h[(b, b)] += w;
                    h[(a, b)] -= w;
                    h[(b, a)] -= w;
                    g[b] += w * d[axis];
                    g[a] -= w * d[axis];
                }
            }
        }
        if let Some(accel) = self.motion_prior {
            let w = (accel * self.episode.dt * self.episode.dt).powi(-2);
            for k in 1..self.episode.window().saturating_sub(1) {
                for i in 0..n {
                    for axis in 0..2 {
                        let idx = [var_index(n, k - 1, i) + axis, var_index(n, k, i) + axis, var_index(n, k + 1, i) + axis];
                        let coef = [1.0, -2.0, 1.0];
                        for (p, cp) in idx.iter().zip(coef) {
                            for (q, cq) in idx.iter().zip(coef) {
                                h[(*p, *q)] += w * cp * cq;
                            }
                        }
                    }
                }
            }
        }
        let chol = h.cholesky().ok_or_else(|| Error::Numeric("linearized normal equations are singular".into()))?;
        Ok(chol.solve(&g))
    }

    /// Stacked decision vector for given positions `[t][vehicle]`.
    pub fn pack(&self, positions: &[Vec<Point2>]) -> DVector<f64> {
        let n = self.episode.n_vehicles();
        let mut x = DVector::zeros(self.n_vars());
        for (k, row) in positions.iter().enumerate() {
            for (i, p) in row.iter().enumerate() {
                let j = var_index(n, k, i);
                x[j] = p.x;
                x[j + 1] = p.y;
            }
        }
        x
    }

    pub fn unpack(&self, x: &DVector<f64>) -> Vec<Vec<Point2>> {
        let n = self.episode.n_vehicles();
        (0..self.episode.window()).map(|k| (0..n).map(|i| point(x, n, k, i)).collect()).collect()
    }

    fn residuals(&self, x: &DVector<f64>, mut visit: impl FnMut(Residual)) {
        let n = self.episode.n_vehicles();
        let cfg = self.cfg;
        for (k, step) in self.episode.steps.iter().enumerate() {
            for (i, z) in step.internal.iter().enumerate() {
                let j = var_index(n, k, i);
                let w = 1.0 / cfg.sigma_gnss;
                visit(Residual { value: (x[j] - z.x) * w, grad: [(j, w), (0, 0.0), (0, 0.0), (0, 0.0)], len: 1 });
                visit(Residual { value: (x[j + 1] - z.y) * w, grad: [(j + 1, w), (0, 0.0), (0, 0.0), (0, 0.0)], len: 1 });
            }
            for m in &step.external {
                let (a, b) = (m.observer, m.subject);
                let (r, bearing, dr, db) = range_bearing_jacobian(point(x, n, k, a), point(x, n, k, b));
                let (ja, jb) = (var_index(n, k, a), var_index(n, k, b));
                let cols = [ja, ja + 1, jb, jb + 1];
                let wr = 1.0 / cfg.sigma_range;
                let wb = 1.0 / cfg.sigma_bearing;
                visit(Residual {
                    value: (r - m.range_meas) * wr,
                    grad: std::array::from_fn(|q| (cols[q], dr[q] * wr)),
                    len: 4,
                });
                visit(Residual {
                    value: wrap_angle(bearing - m.bearing_meas) * wb,
                    grad: std::array::from_fn(|q| (cols[q], db[q] * wb)),
                    len: 4,
                });
            }
        }
        if let Some(accel) = self.motion_prior {
            let dt2 = self.episode.dt * self.episode.dt;
            let w = 1.0 / (accel * dt2);
            for k in 1..self.episode.window().saturating_sub(1) {
                for i in 0..n {
                    for axis in 0..2 {
                        let (p, c, q) =
                            (var_index(n, k - 1, i) + axis, var_index(n, k, i) + axis, var_index(n, k + 1, i) + axis);
                        visit(Residual {
                            value: (x[p] - 2.0 * x[c] + x[q]) * w,
                            grad: [(p, w), (c, -2.0 * w), (q, w), (0, 0.0)],
                            len: 3,
                        });
                    }
                }
            }
        }
    }

    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        let mut c = 0.0;
        self.residuals(x, |r| c += 0.5 * r.value * r.value);
        c
    }

    /// Cost, `J^T J` and `J^T r` at `x`.
    fn normal_equations(&self, x: &DVector<f64>) -> (f64, DMatrix<f64>, DVector<f64>) {
        let nv = self.n_vars();
        let mut jtj = DMatrix::zeros(nv, nv);
        let mut jtr = DVector::zeros(nv);
        let mut cost = 0.0;
        self.residuals(x, |r| {
            cost += 0.5 * r.value * r.value;
            let g = &r.grad[..r.len];
            for &(i, gi) in g {
                jtr[i] += gi * r.value;
                for &(j, gj) in g {
                    jtj[(i, j)] += gi * gj;
                }
            }
        });
        (cost, jtj, jtr)
    }
}

/// Minimizes the window cost with Levenberg-Marquardt, started both from the
/// internal fixes and from [`MleProblem::linearized_guess`]; the lower-cost
/// result is returned.
pub fn mle_window(episode: &Episode, cfg: &NoiseConfig, opts: &MleOptions) -> Result<MleSolution> {
    let problem = MleProblem::new(episode, cfg, opts.motion_prior)?;
    let mut best = levenberg_marquardt(&problem, problem.initial_guess(), opts);
    if episode.external_count() > 0 {
        let alt = levenberg_marquardt(&problem, problem.linearized_guess()?, opts);
        if alt.cost < best.cost {
            best = alt;
        }
    }
    if !best.cost.is_finite() {
        return Err(Error::Numeric(format!("maximum likelihood cost is {}", best.cost)));
    }
    Ok(best)
}

fn levenberg_marquardt(problem: &MleProblem<'_>, mut x: DVector<f64>, opts: &MleOptions) -> MleSolution {
    let mut lambda = opts.lambda_init;
    let (mut cost, mut jtj, mut jtr) = problem.normal_equations(&x);
    let mut iterations = 0;
    let mut converged = false;
    let mut warning = None;
    while iterations < opts.max_iters {
        iterations += 1;
        if cost == 0.0 || jtr.amax() == 0.0 {
            converged = true;
            break;
        }
        let mut a = jtj.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
        }
        let step = a.cholesky().map(|c| c.solve(&(-&jtr)));
        let candidate = step.map(|dx| &x + dx).filter(|c| c.iter().all(|v| v.is_finite()));
        let new_cost = candidate.as_ref().map(|c| problem.cost(c)).unwrap_or(f64::INFINITY);
        if new_cost < cost {
            let decrease = (cost - new_cost) / cost;
            x = candidate.expect("finite cost implies a candidate");
            (cost, jtj, jtr) = problem.normal_equations(&x);
            lambda = (lambda / 10.0).max(1e-15);
            if decrease < opts.rel_tol {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > opts.lambda_max {
                // no descent direction left at machine precision counts as converged
                converged = jtr.amax() < 1e-8 * (1.0 + cost);
                if !converged {
                    warning = Some(format!("damping cap reached after {iterations} iterations, cost {cost}"));
                }
                break;
            }
        }
    }
    MleSolution { positions: problem.unpack(&x), cost, iterations, converged, warning }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::sensing::{make_episode, Adjacency, DomainGraphs, EpisodeStep, ExternalMeasurement};
    use crate::world::{generate_grid_network, simulate_traces};
    use rand::Rng;

    fn episodes(cfg: &NoiseConfig, group: usize, window: usize, seed: u64) -> Episode {
        let net = generate_grid_network(4, 4, 150.0, 14.0).unwrap();
        let t = simulate_traces(&net, 20, 60.0, 1.0, 7).unwrap();
        make_episode(&t, group, window, cfg, seed).unwrap()
    }

    #[test]
    fn gnss_only_returns_the_fixes() {
        let cfg = NoiseConfig::default();
        let mut ep = episodes(&cfg, 4, 5, 1);
        for step in &mut ep.steps {
            step.external.clear();
            step.graphs.meas = Adjacency::empty(4);
        }
        let sol = mle_window(&ep, &cfg, &MleOptions::default()).unwrap();
        assert!(sol.cost < 1e-10);
        for (row, step) in sol.positions.iter().zip(&ep.steps) {
            assert_eq!(row, &step.internal);
        }
    }

    #[test]
    fn noiseless_data_recovers_truth() {
        let cfg = NoiseConfig::default();
        let mut ep = episodes(&cfg, 4, 3, 2);
        // replace every measurement by its exact value
        for step in &mut ep.steps {
            step.internal = step.truth.clone();
            for m in &mut step.external {
                let d = step.truth[m.subject] - step.truth[m.observer];
                m.range_meas = d.norm();
                m.bearing_meas = d.angle();
            }
        }
        let sol = mle_window(&ep, &cfg, &MleOptions::default()).unwrap();
        assert!(sol.cost < 1e-20);
        for (row, step) in sol.positions.iter().zip(&ep.steps) {
            for (p, t) in row.iter().zip(&step.truth) {
                assert!(p.dist(*t) < 1e-9);
            }
        }
    }

    #[test]
    fn linearized_guess_is_exact_on_noiseless_data() {
        let cfg = NoiseConfig::default();
        let mut ep = episodes(&cfg, 5, 3, 4);
        for step in &mut ep.steps {
            step.internal = step.truth.clone();
            for m in &mut step.external {
                let d = step.truth[m.subject] - step.truth[m.observer];
                m.range_meas = d.norm();
                m.bearing_meas = d.angle();
            }
        }
        assert!(ep.external_count() > 0);
        for prior in [None, Some(2.0)] {
            let problem = MleProblem::new(&ep, &cfg, prior).unwrap();
            let x = problem.linearized_guess().unwrap();
            for (row, step) in problem.unpack(&x).iter().zip(&ep.steps) {
                for (p, t) in row.iter().zip(&step.truth) {
                    assert!(p.dist(*t) < 1e-6, "{p:?} vs {t:?}");
                }
            }
        }
    }

    #[test]
    fn noisy_three_vehicle_windows_never_end_above_truth() {
        let cfg = NoiseConfig::default();
        let net = generate_grid_network(4, 4, 150.0, 14.0).unwrap();
        let traces = simulate_traces(&net, 12, 60.0, 1.0, 4).unwrap();
        for seed in 0..200 {
            let ep = make_episode(&traces, 3, 2, &cfg, seed).unwrap();
            let problem = MleProblem::new(&ep, &cfg, None).unwrap();
            let truth: Vec<Vec<Point2>> = ep.steps.iter().map(|s| s.truth.clone()).collect();
            let sol = mle_window(&ep, &cfg, &MleOptions::default()).unwrap();
            assert!(sol.cost <= problem.cost(&problem.pack(&truth)), "seed {seed}: {}", sol.cost);
        }
    }

    fn small_instance(seed: u64) -> (Episode, NoiseConfig) {
        let cfg = NoiseConfig::default();
        let mut r = rng::from_seed(seed);
        let truth_at = |k: usize| -> Vec<Point2> {
            vec![
                Point2::new(0.0 + k as f64 * 10.0, 0.0),
                Point2::new(60.0, 20.0 + k as f64 * 5.0),
                Point2::new(-30.0, 80.0 - k as f64 * 8.0),
            ]
        };
        let mut steps = Vec::new();
        for k in 0..2 {
            let truth = truth_at(k);
            let internal = truth.iter().map(|p| crate::sensing::sense_internal(0, k, *p, &cfg, &mut r).pos_meas).collect();
            let mut external = Vec::new();
            let mut meas = Adjacency::empty(3);
            for a in 0..3 {
                for b in 0..3 {
                    if a != b {
                        let (range, bearing) = crate::sensing::sense_external(truth[a], truth[b], &cfg, &mut r).unwrap();
                        external.push(ExternalMeasurement { observer: a, subject: b, t: k, range_meas: range, bearing_meas: bearing });
                        meas.set(a, b, true);
                    }
                }
            }
            steps.push(EpisodeStep {
                t: k,
                truth,
                internal,
                external,
                graphs: DomainGraphs { t: k, meas, comm: Adjacency::empty(3) },
            });
        }
        (Episode { seed, vehicle_ids: vec![0, 1, 2], start: 0, dt: 1.0, steps }, cfg)
    }

    #[test]
    fn small_instance_beats_truth_and_a_lattice_search() {
        for seed in 0..3 {
            let (ep, cfg) = small_instance(seed);
            let problem = MleProblem::new(&ep, &cfg, None).unwrap();
            assert_eq!(problem.n_residuals(), 2 * 3 * 2 + 2 * 12);
            let sol = mle_window(&ep, &cfg, &MleOptions::default()).unwrap();
            assert!(sol.converged);
            let truth: Vec<Vec<Point2>> = ep.steps.iter().map(|s| s.truth.clone()).collect();
            let x = problem.pack(&sol.positions);
            assert!(sol.cost <= problem.cost(&problem.pack(&truth)));
            assert!((problem.cost(&x) - sol.cost).abs() < 1e-12);
            // dense 0.1 m lattice over each vehicle-step position with the rest held at the solution
            for var in (0..problem.n_vars()).step_by(2) {
                let mut best = (f64::INFINITY, 0.0, 0.0);
                for ix in -20..=20 {
                    for iy in -20..=20 {
                        let mut y = x.clone();
                        y[var] += ix as f64 * 0.1;
                        y[var + 1] += iy as f64 * 0.1;
                        let c = problem.cost(&y);
                        if c < best.0 {
                            best = (c, ix as f64 * 0.1, iy as f64 * 0.1);
                        }
                    }
                }
                assert!(best.1.abs() <= 0.1 + 1e-12 && best.2.abs() <= 0.1 + 1e-12, "lattice optimum {best:?}");
                assert!(sol.cost <= best.0 + 1e-12);
            }
        }
    }

    #[test]
    fn accepted_iterations_never_raise_the_cost() {
        let cfg = NoiseConfig::default();
        let ep = episodes(&cfg, 5, 6, 3);
        let mut last = f64::INFINITY;
        for iters in 1..15 {
            let sol = mle_window(&ep, &cfg, &MleOptions { max_iters: iters, ..MleOptions::default() }).unwrap();
            assert!(sol.cost <= last);
            last = sol.cost;
        }
        let problem = MleProblem::new(&ep, &cfg, None).unwrap();
        assert!(last <= problem.cost(&problem.initial_guess()));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cfg = NoiseConfig::default();
        let ep = episodes(&cfg, 4, 3, 4);
        let problem = MleProblem::new(&ep, &cfg, Some(1.0)).unwrap();
        let mut r = rng::from_seed(5);
        let x = problem.initial_guess().map(|v| v + r.random_range(-5.0..5.0));
        let (c0, _, g) = problem.normal_equations(&x);
        assert!((c0 - problem.cost(&x)).abs() < 1e-9);
        let h = 1e-5;
        for j in 0..problem.n_vars() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let fd = (problem.cost(&xp) - problem.cost(&xm)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "var {j}: {fd} vs {}", g[j]);
        }
        let mut count = 0;
        problem.residuals(&x, |res| {
            count += 1;
            if res.len == 4 {
                assert!(res.value.is_finite());
            }
        });
        assert_eq!(count, problem.n_residuals());
    }

    #[test]
    fn mle_improves_on_fixes_with_cooperation() {
        let cfg = NoiseConfig::default();
        let ep = episodes(&cfg, 6, 10, 5);
        let sol = mle_window(&ep, &cfg, &MleOptions::default()).unwrap();
        let err = |rows: &[Vec<Point2>]| -> f64 {
            rows.iter().zip(&ep.steps).flat_map(|(r, s)| r.iter().zip(&s.truth).map(|(a, b)| a.dist(*b))).sum()
        };
        let fixes: Vec<Vec<Point2>> = ep.steps.iter().map(|s| s.internal.clone()).collect();
        assert!(err(&sol.positions) < err(&fixes));
    }
}
