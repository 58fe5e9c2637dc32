//! Computational and physical error growth, and the time-dependent prior
//! width built from them.
//!
//! Computational error compares a trajectory integrated with step `dt`
//! against a finer reference from the same initial condition. Physical error
//! compares an unperturbed trajectory against one whose initial phase point
//! was jittered by Gaussian noise of width `sigma`. Both are reported as the
//! mean absolute difference over particles and all four coordinates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::pairwise_sum;
use crate::sim::{
    integrate_sampled, sample_initial_conditions, sample_interaction_graph, stream_seed, Dataset,
    PhasePoint, SimConfig, SimError, Split,
};

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("invalid error-profile request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed prior schedule: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// axis2 is the integration time step.
    Computational,
    /// axis2 is the initial perturbation width.
    Physical,
}

/// Mean deviation tabulated over (sampled time, dt or sigma).
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorGrid {
    pub kind: ErrorKind,
    /// Sampled times, `t_index * effective_dt`.
    pub times: Vec<f64>,
    pub params: Vec<f64>,
    pub effective_dt: f64,
    /// Row-major `[time][param]`.
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Runs contributing to each param column.
    pub n_effective: Vec<usize>,
    pub n_runs: usize,
    /// Runs dropped because an integration blew up, per param column.
    pub excluded: Vec<usize>,
}

impl ErrorGrid {
    pub fn at(&self, t: usize, p: usize) -> f64 {
        self.mean[t * self.params.len() + p]
    }

    pub fn stderr_at(&self, t: usize, p: usize) -> f64 {
        self.stderr[t * self.params.len() + p]
    }

    /// Average over the last `fraction` of the time axis for param column `p`.
    pub fn late_time_mean(&self, p: usize, fraction: f64) -> f64 {
        let nt = self.times.len();
        let k = ((nt as f64 * fraction).ceil() as usize).clamp(1, nt);
        let vals: Vec<f64> = (nt - k..nt).map(|t| self.at(t, p)).collect();
        pairwise_sum(&vals) / k as f64
    }

    /// CSV with columns `axis1, axis2, mean_deviation, stderr, n_effective`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis1,axis2,mean_deviation,stderr,n_effective\n");
        for (t, time) in self.times.iter().enumerate() {
            for (p, param) in self.params.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{time},{param},{},{},{}",
                    self.at(t, p),
                    self.stderr_at(t, p),
                    self.n_effective[p]
                );
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ProfileError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Linear interpolation weights along the time axis, clamped.
    fn time_bracket(&self, time: f64) -> (usize, usize, f64, bool) {
        bracket(&self.times, time)
    }
}

/// Index pair and weight for linear interpolation in a sorted axis. The flag
/// is set when `x` fell outside the axis and was clamped.
fn bracket(axis: &[f64], x: f64) -> (usize, usize, f64, bool) {
    let n = axis.len();
    if n == 1 {
        return (0, 0, 0.0, x != axis[0]);
    }
    if x <= axis[0] {
        return (0, 0, 0.0, x < axis[0]);
    }
    if x >= axis[n - 1] {
        return (n - 1, n - 1, 0.0, x > axis[n - 1]);
    }
    let hi = axis.partition_point(|&a| a <= x).min(n - 1);
    let lo = hi - 1;
    let w = (x - axis[lo]) / (axis[hi] - axis[lo]);
    (lo, hi, w, false)
}

/// Mean absolute difference over particles and the four coordinates.
pub fn phase_deviation(a: &PhasePoint, b: &PhasePoint) -> f64 {
    let diffs: Vec<f64> = a
        .particles
        .iter()
        .zip(&b.particles)
        .flat_map(|(p, q)| (0..4).map(move |c| (p[c] - q[c]).abs()))
        .collect();
    pairwise_sum(&diffs) / diffs.len() as f64
}

fn steps_per_sample(effective_dt: f64, dt: f64) -> Result<usize, ProfileError> {
    let ratio = effective_dt / dt;
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-6 * ratio {
        return Err(ProfileError::Invalid(format!(
            "dt {dt} does not divide the sampling interval {effective_dt}"
        )));
    }
    Ok(k as usize)
}

/// Per-run deviation curves (one `Option` per param, `None` for blow-ups),
/// reduced into mean and standard error per cell.
fn reduce(
    kind: ErrorKind,
    params: &[f64],
    horizon: usize,
    effective_dt: f64,
    runs: Vec<Vec<Option<Vec<f64>>>>,
) -> ErrorGrid {
    let np = params.len();
    let mut mean = vec![0.0; horizon * np];
    let mut stderr = vec![0.0; horizon * np];
    let mut n_effective = vec![0; np];
    let mut excluded = vec![0; np];
    for p in 0..np {
        let curves: Vec<&Vec<f64>> = runs.iter().filter_map(|r| r[p].as_ref()).collect();
        n_effective[p] = curves.len();
        excluded[p] = runs.len() - curves.len();
        let n = curves.len();
        for t in 0..horizon {
            let vals: Vec<f64> = curves.iter().map(|c| c[t]).collect();
            if n == 0 {
                mean[t * np + p] = f64::NAN;
                stderr[t * np + p] = f64::NAN;
                continue;
            }
            let m = pairwise_sum(&vals) / n as f64;
            let var = if n > 1 {
                let sq: Vec<f64> = vals.iter().map(|v| (v - m) * (v - m)).collect();
                pairwise_sum(&sq) / (n - 1) as f64
            } else {
                0.0
            };
            mean[t * np + p] = m;
            stderr[t * np + p] = (var / n as f64).sqrt();
        }
    }
    ErrorGrid {
        kind,
        times: (0..horizon).map(|t| t as f64 * effective_dt).collect(),
        params: params.to_vec(),
        effective_dt,
        mean,
        stderr,
        n_effective,
        n_runs: runs.len(),
        excluded,
    }
}

/// Deviation of `dt`-integrated trajectories from a `reference_dt` one.
///
/// `horizon` counts sampled states including `t = 0`.
pub fn computational_error(
    cfg: &SimConfig,
    dt_grid: &[f64],
    reference_dt: f64,
    horizon: usize,
    n_runs: usize,
    seed: u64,
) -> Result<ErrorGrid, ProfileError> {
    cfg.validate()?;
    if dt_grid.is_empty() || horizon == 0 || n_runs == 0 {
        return Err(ProfileError::Invalid(
            "empty grid, horizon or run count".into(),
        ));
    }
    let min_dt = dt_grid.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(reference_dt > 0.0) || reference_dt > min_dt {
        return Err(ProfileError::Invalid(format!(
            "reference dt {reference_dt} must be positive and no larger than {min_dt}"
        )));
    }
    let eff = cfg.effective_dt();
    let ref_every = steps_per_sample(eff, reference_dt)?;
    let every: Vec<usize> = dt_grid
        .iter()
        .map(|&dt| steps_per_sample(eff, dt))
        .collect::<Result<_, _>>()?;

    let runs: Vec<Vec<Option<Vec<f64>>>> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, Split::Train, run));
            let graph = sample_interaction_graph(cfg, &mut rng);
            let init = sample_initial_conditions(cfg, &mut rng);
            let Ok(reference) =
                integrate_sampled(&graph, &init, cfg, reference_dt, ref_every, horizon, true)
            else {
                return vec![None; dt_grid.len()];
            };
            dt_grid
                .iter()
                .zip(&every)
                .map(|(&dt, &k)| {
                    let states =
                        integrate_sampled(&graph, &init, cfg, dt, k, horizon, true).ok()?;
                    Some(
                        states
                            .iter()
                            .zip(&reference)
                            .map(|(a, b)| phase_deviation(a, b))
                            .collect(),
                    )
                })
                .collect()
        })
        .collect();
    Ok(reduce(
        ErrorKind::Computational,
        dt_grid,
        horizon,
        eff,
        runs,
    ))
}

/// Deviation caused by Gaussian jitter of width `sigma` on all four initial
/// coordinates, same graph, integrated at `dt_fine`.
pub fn physical_error(
    cfg: &SimConfig,
    sigma_grid: &[f64],
    horizon: usize,
    n_runs: usize,
    seed: u64,
) -> Result<ErrorGrid, ProfileError> {
    cfg.validate()?;
    if sigma_grid.is_empty() || horizon == 0 || n_runs == 0 {
        return Err(ProfileError::Invalid(
            "empty grid, horizon or run count".into(),
        ));
    }
    if sigma_grid.iter().any(|s| !(*s >= 0.0)) {
        return Err(ProfileError::Invalid(
            "perturbation widths must be non-negative".into(),
        ));
    }
    let eff = cfg.effective_dt();
    let l = cfg.box_half_width;
    let runs: Vec<Vec<Option<Vec<f64>>>> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, Split::Validation, run));
            let graph = sample_interaction_graph(cfg, &mut rng);
            let init = sample_initial_conditions(cfg, &mut rng);
            let Ok(base) = integrate_sampled(
                &graph,
                &init,
                cfg,
                cfg.dt_fine,
                cfg.sample_every,
                horizon,
                true,
            ) else {
                return vec![None; sigma_grid.len()];
            };
            sigma_grid
                .iter()
                .enumerate()
                .map(|(k, &sigma)| {
                    let mut noise_rng = ChaCha8Rng::seed_from_u64(stream_seed(
                        seed ^ 0x5EED,
                        Split::Test,
                        run * sigma_grid.len() + k,
                    ));
                    let mut perturbed = init.clone();
                    if sigma > 0.0 {
                        let normal = Normal::new(0.0, sigma).ok()?;
                        for p in &mut perturbed.particles {
                            for v in p.iter_mut() {
                                *v += normal.sample(&mut noise_rng);
                            }
                            // keep jittered positions inside the box
                            p[0] = p[0].clamp(-l, l);
                            p[1] = p[1].clamp(-l, l);
                        }
                    }
                    let states = integrate_sampled(
                        &graph,
                        &perturbed,
                        cfg,
                        cfg.dt_fine,
                        cfg.sample_every,
                        horizon,
                        true,
                    )
                    .ok()?;
                    Some(
                        states
                            .iter()
                            .zip(&base)
                            .map(|(a, b)| phase_deviation(a, b))
                            .collect(),
                    )
                })
                .collect()
        })
        .collect();
    Ok(reduce(ErrorKind::Physical, sigma_grid, horizon, eff, runs))
}

/// Mean over trajectories, particles and coordinates of `|state[1] - state[0]|`.
pub fn delta_x0(dataset: &Dataset) -> Result<f64, ProfileError> {
    if dataset.is_empty() || dataset.n_steps() < 2 {
        return Err(ProfileError::Invalid(
            "need a non-empty dataset with at least two steps".into(),
        ));
    }
    let devs: Vec<f64> = dataset
        .trajectories
        .iter()
        .map(|tr| phase_deviation(&tr.states[1], &tr.states[0]))
        .collect();
    Ok(pairwise_sum(&devs) / devs.len() as f64)
}

/// Prior standard deviation per sampled step since the last known state.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSchedule {
    pub delta_x0: f64,
    pub sigma: Vec<f64>,
    pub clamped_dt: bool,
    pub clamped_seed: bool,
    pub clamped_time: bool,
}

impl PriorSchedule {
    /// Width at step `t`; steps past the end reuse the last entry.
    pub fn at(&self, t: usize) -> f64 {
        self.sigma[t.min(self.sigma.len() - 1)]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_index,sigma\n");
        for (t, v) in self.sigma.iter().enumerate() {
            let _ = writeln!(s, "{t},{v}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ProfileError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parses `t_index,sigma` rows. `delta_x0` is recovered from step 0,
    /// where both error grids vanish.
    pub fn from_csv(text: &str) -> Result<Self, ProfileError> {
        let mut sigma = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line_no == 0 && line.starts_with("t_index") {
                continue;
            }
            let mut parts = line.split(',');
            let t: usize = parts
                .next()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| ProfileError::Parse(format!("line {}: bad t_index", line_no + 1)))?;
            let v: f64 = parts
                .next()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| ProfileError::Parse(format!("line {}: bad sigma", line_no + 1)))?;
            if t != sigma.len() {
                return Err(ProfileError::Parse(format!(
                    "line {}: t_index out of order",
                    line_no + 1
                )));
            }
            if !(v > 0.0) {
                return Err(ProfileError::Parse(format!(
                    "line {}: sigma must be positive",
                    line_no + 1
                )));
            }
            sigma.push(v);
        }
        if sigma.is_empty() {
            return Err(ProfileError::Parse("no rows".into()));
        }
        Ok(PriorSchedule {
            delta_x0: sigma[0],
            sigma,
            clamped_dt: false,
            clamped_seed: false,
            clamped_time: false,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self, ProfileError> {
        PriorSchedule::from_csv(&fs::read_to_string(path)?)
    }
}

/// Bilinear lookup in an error grid. Returns the value and whether either
/// coordinate was clamped. When `zero_below` is set and the grid's smallest
/// parameter is positive, an implicit all-zero column at parameter 0 is used
/// (no perturbation means no deviation).
fn interpolate(grid: &ErrorGrid, time: f64, param: f64, zero_below: bool) -> (f64, bool, bool) {
    let (t0, t1, wt, t_clamped) = grid.time_bracket(time);
    let mut axis = grid.params.clone();
    let values = |t: usize| -> Vec<f64> { (0..grid.params.len()).map(|p| grid.at(t, p)).collect() };
    let (mut row0, mut row1) = (values(t0), values(t1));
    if zero_below && axis[0] > 0.0 {
        axis.insert(0, 0.0);
        row0.insert(0, 0.0);
        row1.insert(0, 0.0);
    }
    let (p0, p1, wp, p_clamped) = bracket(&axis, param);
    let lerp = |row: &[f64]| row[p0] * (1.0 - wp) + row[p1] * wp;
    let v = lerp(&row0) * (1.0 - wt) + lerp(&row1) * wt;
    (v, t_clamped, p_clamped)
}

/// `sigma_t = sqrt(dx0^2 + comp(t, model_dt)^2 + phys(t; seed = comp(t, model_dt))^2)`.
pub fn build_prior_schedule(
    comp: &ErrorGrid,
    phys: &ErrorGrid,
    delta_x0: f64,
    model_dt: f64,
    n_steps: usize,
) -> Result<PriorSchedule, ProfileError> {
    if !(delta_x0 > 0.0) {
        return Err(ProfileError::Invalid("delta_x0 must be positive".into()));
    }
    if n_steps == 0 {
        return Err(ProfileError::Invalid(
            "schedule needs at least one step".into(),
        ));
    }
    let mut out = PriorSchedule {
        delta_x0,
        sigma: Vec::with_capacity(n_steps),
        clamped_dt: false,
        clamped_seed: false,
        clamped_time: false,
    };
    for t in 0..n_steps {
        let time = t as f64 * comp.effective_dt;
        let (c, tc, dc) = interpolate(comp, time, model_dt, false);
        let (p, tp, sc) = interpolate(phys, time, c, true);
        out.clamped_time |= tc || tp;
        out.clamped_dt |= dc;
        out.clamped_seed |= sc;
        out.sigma.push((delta_x0 * delta_x0 + c * c + p * p).sqrt());
    }
    Ok(out)
}
