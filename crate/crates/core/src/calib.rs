//! Desired-speed calibration: Gaussian kernel density estimation over
//! simulated per-vehicle mean speeds, a negative log-likelihood objective
//! against observed mean speeds, a Nelder-Mead simplex minimizer, and a
//! multi-start driver.
//!
//! The parameter vector is theta = (mu_car, sigma_car, mu_truck,
//! sigma_truck) in km/h. Every objective evaluation re-simulates under a
//! fixed seed taken from the base config (common random numbers), so the
//! objective is a deterministic and, away from rare discrete-event flips, a
//! smooth function of theta.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::sim::{run, Recording, SimConfig};
use crate::trajdata::{ObservedSpeeds, VehicleClass};
use crate::{Error, Result};

/// Density values are clamped here before any logarithm, so outliers cost a
/// large but finite objective contribution instead of an infinite one.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// An objective at or above this value marks a penalized (failed) point.
pub const PENALTY_BASE: f64 = 1e9;

const PENALTY_SCALE: f64 = 1e6;

const SQRT_TAU: f64 = 2.506_628_274_631_000_7;

/// Gaussian kernel density estimate over speeds in km/h.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    points: Vec<f64>,
    bandwidth: f64,
}

impl Density {
    /// Builds from explicit kernel centers and bandwidth. Accepts a single
    /// point (unlike [`kde_fit`]) so tests can use closed-form densities.
    pub fn from_parts(points: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if points.is_empty() || points.iter().any(|p| !p.is_finite()) {
            return Err(Error::DegenerateDensity(format!(
                "need at least one finite kernel center, got {} points",
                points.len()
            )));
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::DegenerateDensity(format!(
                "bandwidth must be finite and > 0, got {bandwidth}"
            )));
        }
        Ok(Self { points, bandwidth })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (ss / (n - 1.0)).sqrt()
}

/// Linear-interpolation quantile over a sorted slice (the common "type 7"
/// definition: h = (n-1)p).
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fits a KDE with Silverman's bandwidth
/// h = 0.9 * min(std, IQR/1.34) * n^(-1/5).
pub fn kde_fit(samples: &[f64]) -> Result<Density> {
    kde_fit_with(samples, None)
}

/// Like [`kde_fit`] but with an optional fixed bandwidth override.
pub fn kde_fit_with(samples: &[f64], bandwidth: Option<f64>) -> Result<Density> {
    if samples.len() < 2 {
        return Err(Error::DegenerateDensity(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::DegenerateDensity("non-finite sample".into()));
    }
    let h = match bandwidth {
        Some(h) => h,
        None => {
            let mut sorted = samples.to_vec();
            sorted.sort_unstable_by(f64::total_cmp);
            let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
            let spread = sample_std(samples).min(iqr / 1.34);
            0.9 * spread * (samples.len() as f64).powf(-0.2)
        }
    };
    Density::from_parts(samples.to_vec(), h)
}

/// Evaluates the density at `x` (1/(km/h)). The result is clamped to
/// [`DENSITY_FLOOR`], so it is strictly positive even in the far tails.
pub fn kde_eval(density: &Density, x: f64) -> f64 {
    let inv_h = 1.0 / density.bandwidth;
    let mut sum = 0.0;
    for &p in &density.points {
        let z = (x - p) * inv_h;
        sum += (-0.5 * z * z).exp();
    }
    let raw = sum * inv_h / (density.points.len() as f64 * SQRT_TAU);
    raw.max(DENSITY_FLOOR)
}

/// Negative log-likelihood of the observed speeds under per-class densities.
/// A missing density (too few simulated vehicles of that class) prices each
/// of its observations at the floor.
pub fn neg_log_likelihood(
    car: Option<&Density>,
    truck: Option<&Density>,
    observed: &ObservedSpeeds,
) -> f64 {
    let mut nll = 0.0;
    for &v in &observed.car_speeds {
        nll -= car.map_or(DENSITY_FLOOR, |d| kde_eval(d, v)).ln();
    }
    for &v in &observed.truck_speeds {
        nll -= truck.map_or(DENSITY_FLOOR, |d| kde_eval(d, v)).ln();
    }
    nll
}

/// The four calibrated parameters in km/h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theta {
    pub mu_car_kmh: f64,
    pub sigma_car_kmh: f64,
    pub mu_truck_kmh: f64,
    pub sigma_truck_kmh: f64,
}

impl Theta {
    pub fn to_array(self) -> [f64; 4] {
        [
            self.mu_car_kmh,
            self.sigma_car_kmh,
            self.mu_truck_kmh,
            self.sigma_truck_kmh,
        ]
    }

    pub fn from_array(x: [f64; 4]) -> Self {
        Self {
            mu_car_kmh: x[0],
            sigma_car_kmh: x[1],
            mu_truck_kmh: x[2],
            sigma_truck_kmh: x[3],
        }
    }
}

/// Componentwise search bounds, generous supersets of plausible highway
/// desired-speed parameters.
pub const DEFAULT_BOUNDS: [(f64, f64); 4] =
    [(80.0, 200.0), (1.0, 40.0), (60.0, 120.0), (1.0, 20.0)];

#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub observed: ObservedSpeeds,
    /// Base simulation config; its seed is the fixed evaluation seed and its
    /// kde.bandwidth (if set) overrides Silverman's rule.
    pub base: SimConfig,
    pub bounds: [(f64, f64); 4],
}

impl CalibrationProblem {
    pub fn new(observed: ObservedSpeeds, base: SimConfig) -> Self {
        Self {
            observed,
            base,
            bounds: DEFAULT_BOUNDS,
        }
    }

    fn config_for(&self, theta: &[f64; 4]) -> SimConfig {
        let mut config = self.base.clone();
        config.desired_speed.car.mu_kmh = theta[0];
        config.desired_speed.car.sigma_kmh = theta[1];
        config.desired_speed.truck.mu_kmh = theta[2];
        config.desired_speed.truck.sigma_kmh = theta[3];
        config
    }
}

/// The calibration objective: simulate at theta under the fixed evaluation
/// seed, fit per-class KDEs to simulated mean speeds, and return the
/// negative log-likelihood of the observations. Out-of-bounds theta and
/// congested runs return additive penalties instead.
pub fn objective(theta: &[f64; 4], problem: &CalibrationProblem) -> f64 {
    let mut violation = 0.0;
    for (x, (lo, hi)) in theta.iter().zip(problem.bounds) {
        if !x.is_finite() {
            return PENALTY_BASE + PENALTY_SCALE;
        }
        if *x < lo {
            violation += lo - x;
        } else if *x > hi {
            violation += x - hi;
        }
    }
    if violation > 0.0 {
        return PENALTY_BASE + PENALTY_SCALE * violation;
    }
    let config = problem.config_for(theta);
    let output = match run(&config, Recording::StatsOnly) {
        Ok(output) => output,
        Err(err) => {
            log::warn!("objective evaluation at {theta:?} aborted: {err}");
            return PENALTY_BASE;
        }
    };
    let mut car_speeds = Vec::new();
    let mut truck_speeds = Vec::new();
    for stats in &output.stats {
        match stats.class {
            VehicleClass::Car => car_speeds.push(stats.mean_speed_kmh),
            VehicleClass::Truck => truck_speeds.push(stats.mean_speed_kmh),
            _ => {}
        }
    }
    let bandwidth = problem.base.kde.bandwidth;
    let car = kde_fit_with(&car_speeds, bandwidth).ok();
    let truck = kde_fit_with(&truck_speeds, bandwidth).ok();
    if car.is_none() || truck.is_none() {
        log::warn!(
            "objective evaluation at {theta:?} produced degenerate densities ({} cars, {} trucks)",
            car_speeds.len(),
            truck_speeds.len()
        );
    }
    neg_log_likelihood(car.as_ref(), truck.as_ref(), &problem.observed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmOptions {
    /// Converged when the largest vertex distance to the best vertex
    /// (infinity norm) is at most this.
    pub xatol: f64,
    /// ... and the objective spread over the simplex is at most this.
    pub fatol: f64,
    pub max_iterations: u64,
}

impl Default for NmOptions {
    fn default() -> Self {
        Self {
            xatol: 1e-3,
            fatol: 1e-6,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: u64,
    pub evaluations: u64,
    pub converged: bool,
}

/// Derivative-free simplex minimization with the dimension-adaptive
/// reflection/expansion/contraction/shrink coefficients. The initial
/// simplex perturbs each coordinate of x0 by 5% (or 0.00025 where zero).
pub fn nelder_mead<F>(mut f: F, x0: &[f64], options: &NmOptions) -> Result<NmResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return Err(Error::OptimizerInit("empty parameter vector".into()));
    }
    if x0.iter().any(|x| !x.is_finite()) {
        return Err(Error::OptimizerInit(format!("non-finite start {x0:?}")));
    }
    let f0 = f(x0);
    if !f0.is_finite() {
        return Err(Error::OptimizerInit(format!("objective at start is {f0}")));
    }
    let mut evaluations = 1u64;
    let mut eval = |x: &[f64]| {
        evaluations += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    // Coefficients after Gao & Han, with the dimension floored at 2 so the
    // one-dimensional case keeps a usable shrink factor.
    let nd = n.max(2) as f64;
    let rho = 1.0;
    let chi = 1.0 + 2.0 / nd;
    let psi = 0.75 - 1.0 / (2.0 * nd);
    let sigma = 1.0 - 1.0 / nd;

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut vertex = x0.to_vec();
        if vertex[i] != 0.0 {
            vertex[i] *= 1.05;
        } else {
            vertex[i] = 0.00025;
        }
        simplex.push(vertex);
    }
    let mut fsim: Vec<f64> = Vec::with_capacity(n + 1);
    fsim.push(f0);
    for vertex in &simplex[1..] {
        fsim.push(eval(vertex));
    }
    sort_simplex(&mut simplex, &mut fsim);

    let mut iterations = 0u64;
    let mut converged = false;
    while iterations < options.max_iterations {
        let mut max_dx: f64 = 0.0;
        let mut max_df: f64 = 0.0;
        for vertex in &simplex[1..] {
            for (a, b) in vertex.iter().zip(&simplex[0]) {
                max_dx = max_dx.max((a - b).abs());
            }
        }
        for fv in &fsim[1..] {
            max_df = max_df.max((fv - fsim[0]).abs());
        }
        if max_dx <= options.xatol && max_df <= options.fatol {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for vertex in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(vertex) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let combine = |a: f64, b: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| a * c + b * w)
                .collect()
        };

        let xr = combine(1.0 + rho, -rho);
        let fr = eval(&xr);
        if fr < fsim[0] {
            let xe = combine(1.0 + rho * chi, -rho * chi);
            let fe = eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                fsim[n] = fe;
            } else {
                simplex[n] = xr;
                fsim[n] = fr;
            }
        } else if fr < fsim[n - 1] {
            simplex[n] = xr;
            fsim[n] = fr;
        } else {
            let mut shrink = false;
            if fr < fsim[n] {
                let xc = combine(1.0 + psi * rho, -psi * rho);
                let fc = eval(&xc);
                if fc <= fr {
                    simplex[n] = xc;
                    fsim[n] = fc;
                } else {
                    shrink = true;
                }
            } else {
                let xcc = combine(1.0 - psi, psi);
                let fcc = eval(&xcc);
                if fcc < fsim[n] {
                    simplex[n] = xcc;
                    fsim[n] = fcc;
                } else {
                    shrink = true;
                }
            }
            if shrink {
                let best = simplex[0].clone();
                for j in 1..=n {
                    for (v, b) in simplex[j].iter_mut().zip(&best) {
                        *v = b + sigma * (*v - b);
                    }
                    fsim[j] = eval(&simplex[j]);
                }
            }
        }
        sort_simplex(&mut simplex, &mut fsim);
        iterations += 1;
    }

    Ok(NmResult {
        x: simplex.swap_remove(0),
        f: fsim[0],
        iterations,
        evaluations,
        converged,
    })
}

fn sort_simplex(simplex: &mut [Vec<f64>], fsim: &mut [f64]) {
    let mut order: Vec<usize> = (0..fsim.len()).collect();
    order.sort_by(|&a, &b| fsim[a].total_cmp(&fsim[b]));
    let mut new_simplex: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
    let new_fsim: Vec<f64> = order.iter().map(|&i| fsim[i]).collect();
    for (dst, src) in simplex.iter_mut().zip(new_simplex.drain(..)) {
        *dst = src;
    }
    fsim.copy_from_slice(&new_fsim);
}

/// One restart's trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub restart: usize,
    pub initial: Theta,
    pub theta: Theta,
    pub objective: f64,
    pub iterations: u64,
    pub evaluations: u64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub best: Theta,
    pub objective: f64,
    pub best_restart: usize,
    pub runs: Vec<RunRecord>,
}

fn start_rng(master_seed: u64, restart: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(restart);
    rng
}

/// Uniform initial points within the problem bounds, one per restart,
/// derived from independent streams of the master seed.
pub fn uniform_starts(
    problem: &CalibrationProblem,
    n_restarts: usize,
    master_seed: u64,
) -> Vec<[f64; 4]> {
    (0..n_restarts)
        .map(|i| {
            let mut rng = start_rng(master_seed, i as u64);
            let mut x = [0.0; 4];
            for (slot, (lo, hi)) in x.iter_mut().zip(problem.bounds) {
                *slot = lo + rng.random::<f64>() * (hi - lo);
            }
            x
        })
        .collect()
}

/// Multi-start calibration from explicit initial points. Restarts are
/// independent and may run concurrently; the result is identical for any
/// level of concurrency. Ties on the objective go to the lowest restart
/// index.
pub fn calibrate_with_starts(
    problem: &CalibrationProblem,
    starts: &[[f64; 4]],
    options: &NmOptions,
) -> Result<CalibrationResult> {
    if starts.is_empty() {
        return Err(Error::Config("calibration needs at least one start".into()));
    }
    problem.base.validate()?;
    for (lo, hi) in &problem.bounds {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!(
                "calibration bounds must satisfy lo < hi, got ({lo}, {hi})"
            )));
        }
    }
    let runs: Vec<Result<RunRecord>> = exec::map_indexed(starts.len(), |i| {
        let x0 = starts[i];
        let result = nelder_mead(
            |x| objective(&[x[0], x[1], x[2], x[3]], problem),
            &x0,
            options,
        )?;
        Ok(RunRecord {
            restart: i,
            initial: Theta::from_array(x0),
            theta: Theta::from_array([result.x[0], result.x[1], result.x[2], result.x[3]]),
            objective: result.f,
            iterations: result.iterations,
            evaluations: result.evaluations,
            converged: result.converged,
        })
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let best = runs
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .expect("at least one run");
    if best.objective >= PENALTY_BASE {
        return Err(Error::CalibrationFailed(format!(
            "all {} restarts ended penalized (best objective {:.3e})",
            runs.len(),
            best.objective
        )));
    }
    let (best_theta, best_objective, best_restart) = (best.theta, best.objective, best.restart);
    Ok(CalibrationResult {
        best: best_theta,
        objective: best_objective,
        best_restart,
        runs,
    })
}

/// Multi-start calibration with uniformly drawn initial points.
pub fn calibrate(
    problem: &CalibrationProblem,
    n_restarts: usize,
    master_seed: u64,
    options: &NmOptions,
) -> Result<CalibrationResult> {
    if n_restarts == 0 {
        return Err(Error::Config("n_restarts must be at least 1".into()));
    }
    let starts = uniform_starts(problem, n_restarts, master_seed);
    calibrate_with_starts(problem, &starts, options)
}
