//! Spring/charge particle dynamics in a reflecting 2D box.
//!
//! Particles have unit mass. Springs are Hookean with zero rest length and
//! charged pairs repel through a softened inverse-square force. Newton's
//! equations are integrated with kick-drift-kick leapfrog and every
//! `sample_every`-th state is recorded.

mod dataset;

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use dataset::{
    generate_dataset, stream_seed, Dataset, DatasetSplits, Split, SplitCounts, DATASET_MAGIC,
    DATASET_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("non-finite position for particle {particle}")]
    NonFinite { particle: usize },
    #[error("integration blew up at fine step {step} (non-finite state)")]
    BlowUp { step: usize },
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_particles: usize,
    pub box_half_width: f64,
    pub dt_fine: f64,
    pub sample_every: usize,
    pub n_sampled_steps: usize,
    pub spring_constant: f64,
    pub charge_constant: f64,
    /// +1 repels like charges, -1 attracts.
    pub charge_sign: f64,
    pub softening: f64,
    pub init_pos_sigma: f64,
    pub init_speed: f64,
    pub spring_edge_prob: f64,
    pub charge_prob: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_particles: 5,
            box_half_width: 5.0,
            dt_fine: 0.001,
            sample_every: 100,
            n_sampled_steps: 100,
            spring_constant: 0.1,
            charge_constant: 1.0,
            charge_sign: 1.0,
            softening: 0.1,
            init_pos_sigma: 0.5,
            init_speed: 0.5,
            spring_edge_prob: 0.5,
            charge_prob: 0.5,
            rng_seed: 42,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        if self.n_particles < 2 {
            return bad("n_particles must be at least 2");
        }
        if !(self.box_half_width > 0.0) {
            return bad("box_half_width must be positive");
        }
        if !(self.dt_fine > 0.0) {
            return bad("dt_fine must be positive");
        }
        if self.sample_every < 1 || self.n_sampled_steps < 1 {
            return bad("sample_every and n_sampled_steps must be at least 1");
        }
        if !(self.spring_constant >= 0.0 && self.charge_constant >= 0.0) {
            return bad("force constants must be non-negative");
        }
        if !(self.softening > 0.0 && self.init_pos_sigma > 0.0) {
            return bad("softening and init_pos_sigma must be positive");
        }
        if !(self.init_speed >= 0.0) {
            return bad("init_speed must be non-negative");
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.spring_edge_prob) || !unit.contains(&self.charge_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.charge_sign.abs() != 1.0 {
            return bad("charge_sign must be +1 or -1");
        }
        Ok(())
    }

    /// Time between recorded states.
    pub fn effective_dt(&self) -> f64 {
        self.dt_fine * self.sample_every as f64
    }
}

/// Ground-truth relations: symmetric spring adjacency and per-particle charge flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    n: usize,
    springs: Vec<bool>,
    charges: Vec<bool>,
}

impl InteractionGraph {
    pub fn empty(n: usize) -> Self {
        InteractionGraph {
            n,
            springs: vec![false; n * n],
            charges: vec![false; n],
        }
    }

    /// Builds a graph from the unordered spring pairs `(i, j)`, `i != j`.
    pub fn from_parts(n: usize, spring_pairs: &[(usize, usize)], charges: Vec<bool>) -> Self {
        assert_eq!(charges.len(), n, "one charge flag per particle");
        let mut g = InteractionGraph {
            n,
            springs: vec![false; n * n],
            charges,
        };
        for &(i, j) in spring_pairs {
            assert!(i != j && i < n && j < n, "invalid spring pair ({i}, {j})");
            g.springs[i * n + j] = true;
            g.springs[j * n + i] = true;
        }
        g
    }

    pub fn n_particles(&self) -> usize {
        self.n
    }

    pub fn spring(&self, i: usize, j: usize) -> bool {
        self.springs[i * self.n + j]
    }

    pub fn charged(&self, i: usize) -> bool {
        self.charges[i]
    }

    pub fn charges(&self) -> &[bool] {
        &self.charges
    }

    /// Charge interaction is active when both ends carry charge.
    pub fn charge_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.charges[i] && self.charges[j]
    }

    pub fn set_spring(&mut self, i: usize, j: usize, on: bool) {
        assert_ne!(i, j, "no self springs");
        self.springs[i * self.n + j] = on;
        self.springs[j * self.n + i] = on;
    }

    pub fn set_charge(&mut self, i: usize, on: bool) {
        self.charges[i] = on;
    }

    /// Unordered pairs `(i, j)` with `i < j`, row-major.
    pub fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
    }

    /// Same graph with particles relabelled: new particle `k` is old `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut g = InteractionGraph::empty(n);
        for a in 0..n {
            g.charges[a] = self.charges[perm[a]];
            for b in 0..n {
                g.springs[a * n + b] = self.spring(perm[a], perm[b]);
            }
        }
        g
    }
}

/// Per-particle `(x, y, v_x, v_y)` at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub particles: Vec<[f64; 4]>,
}

impl PhasePoint {
    pub fn zeros(n: usize) -> Self {
        PhasePoint {
            particles: vec![[0.0; 4]; n],
        }
    }

    pub fn n_particles(&self) -> usize {
        self.particles.len()
    }

    pub fn is_finite(&self) -> bool {
        self.particles.iter().flatten().all(|v| v.is_finite())
    }

    pub fn momentum(&self) -> [f64; 2] {
        self.particles
            .iter()
            .fold([0.0, 0.0], |acc, p| [acc[0] + p[2], acc[1] + p[3]])
    }

    /// Copy with every velocity negated (time reversal).
    pub fn reversed(&self) -> Self {
        PhasePoint {
            particles: self
                .particles
                .iter()
                .map(|p| [p[0], p[1], -p[2], -p[3]])
                .collect(),
        }
    }
}

/// Recorded states of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<PhasePoint>,
    pub graph: InteractionGraph,
    pub effective_dt: f64,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len()
    }
}

pub fn sample_interaction_graph<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> InteractionGraph {
    let n = cfg.n_particles;
    let mut g = InteractionGraph::empty(n);
    for (i, j) in InteractionGraph::upper_pairs(n) {
        if rng.random_bool(cfg.spring_edge_prob) {
            g.set_spring(i, j, true);
        }
    }
    for i in 0..n {
        g.charges[i] = rng.random_bool(cfg.charge_prob);
    }
    g
}

/// Gaussian positions (out-of-box coordinates are redrawn) and velocities of
/// fixed norm `init_speed` in a uniformly random direction.
pub fn sample_initial_conditions<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> PhasePoint {
    let normal = Normal::new(0.0, cfg.init_pos_sigma).expect("init_pos_sigma validated positive");
    let l = cfg.box_half_width;
    let draw = |rng: &mut R| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= l {
            break v;
        }
    };
    let particles = (0..cfg.n_particles)
        .map(|_| {
            let x = draw(rng);
            let y = draw(rng);
            let theta = rng.random_range(0.0..TAU);
            let (s, c) = theta.sin_cos();
            [x, y, cfg.init_speed * c, cfg.init_speed * s]
        })
        .collect();
    PhasePoint { particles }
}

/// Net force on each particle. Each pair force is computed once and applied
/// with opposite signs, so momentum is conserved to rounding.
pub fn compute_forces(
    state: &PhasePoint,
    graph: &InteractionGraph,
    cfg: &SimConfig,
) -> Result<Vec<[f64; 2]>, SimError> {
    let n = state.n_particles();
    if let Some(particle) = state
        .particles
        .iter()
        .position(|p| !(p[0].is_finite() && p[1].is_finite()))
    {
        return Err(SimError::NonFinite { particle });
    }
    let mut forces = vec![[0.0; 2]; n];
    accumulate_forces(state, graph, cfg, &mut forces);
    Ok(forces)
}

fn accumulate_forces(
    state: &PhasePoint,
    graph: &InteractionGraph,
    cfg: &SimConfig,
    forces: &mut [[f64; 2]],
) {
    let n = state.n_particles();
    let eps2 = cfg.softening * cfg.softening;
    let coulomb = cfg.charge_constant * cfg.charge_sign;
    forces.iter_mut().for_each(|f| *f = [0.0, 0.0]);
    for i in 0..n {
        let pi = &state.particles[i];
        for j in i + 1..n {
            let pj = &state.particles[j];
            let dx = pi[0] - pj[0];
            let dy = pi[1] - pj[1];
            let mut fx = 0.0;
            let mut fy = 0.0;
            if graph.spring(i, j) {
                fx -= cfg.spring_constant * dx;
                fy -= cfg.spring_constant * dy;
            }
            if graph.charge_edge(i, j) {
                let r2 = dx * dx + dy * dy + eps2;
                let scale = coulomb / (r2 * r2.sqrt());
                fx += scale * dx;
                fy += scale * dy;
            }
            forces[i][0] += fx;
            forces[i][1] += fy;
            forces[j][0] -= fx;
            forces[j][1] -= fy;
        }
    }
}

/// Kinetic plus spring plus softened Coulomb potential energy.
pub fn total_energy(state: &PhasePoint, graph: &InteractionGraph, cfg: &SimConfig) -> f64 {
    let n = state.n_particles();
    let eps2 = cfg.softening * cfg.softening;
    let mut e = 0.0;
    for p in &state.particles {
        e += 0.5 * (p[2] * p[2] + p[3] * p[3]);
    }
    for i in 0..n {
        for j in i + 1..n {
            let dx = state.particles[i][0] - state.particles[j][0];
            let dy = state.particles[i][1] - state.particles[j][1];
            let r2 = dx * dx + dy * dy;
            if graph.spring(i, j) {
                e += 0.5 * cfg.spring_constant * r2;
            }
            if graph.charge_edge(i, j) {
                e += cfg.charge_constant * cfg.charge_sign / (r2 + eps2).sqrt();
            }
        }
    }
    e
}

/// Mirror a coordinate back into `[-l, l]`, flipping the velocity per bounce.
/// Returns `false` if the coordinate is not finite.
fn reflect(x: &mut f64, v: &mut f64, l: f64) -> bool {
    if !x.is_finite() {
        return false;
    }
    while x.abs() > l {
        if *x > l {
            *x = 2.0 * l - *x;
        } else {
            *x = -2.0 * l - *x;
        }
        *v = -*v;
    }
    true
}

/// Leapfrog integrator that reuses the end-of-step acceleration as the next
/// step's opening kick.
pub struct Leapfrog<'a> {
    graph: &'a InteractionGraph,
    cfg: &'a SimConfig,
    forces: Vec<[f64; 2]>,
    walls: bool,
}

impl<'a> Leapfrog<'a> {
    pub fn new(state: &PhasePoint, graph: &'a InteractionGraph, cfg: &'a SimConfig) -> Self {
        let mut forces = vec![[0.0; 2]; state.n_particles()];
        accumulate_forces(state, graph, cfg, &mut forces);
        Leapfrog {
            graph,
            cfg,
            forces,
            walls: true,
        }
    }

    /// Free space: no wall reflections.
    pub fn without_walls(mut self) -> Self {
        self.walls = false;
        self
    }

    /// Kick-drift-kick. Reflection happens after the drift so the closing
    /// kick sees forces at the in-box position.
    pub fn step(&mut self, state: &mut PhasePoint, dt: f64) -> bool {
        let half = 0.5 * dt;
        let l = self.cfg.box_half_width;
        for (p, f) in state.particles.iter_mut().zip(&self.forces) {
            p[2] += half * f[0];
            p[3] += half * f[1];
            p[0] += dt * p[2];
            p[1] += dt * p[3];
            if self.walls {
                let [x, y, vx, vy] = p;
                if !reflect(x, vx, l) || !reflect(y, vy, l) {
                    return false;
                }
            }
        }
        accumulate_forces(state, self.graph, self.cfg, &mut self.forces);
        for (p, f) in state.particles.iter_mut().zip(&self.forces) {
            p[2] += half * f[0];
            p[3] += half * f[1];
        }
        state.is_finite()
    }
}

/// One kick-drift-kick step with elastic walls.
pub fn leapfrog_step(
    state: &PhasePoint,
    graph: &InteractionGraph,
    cfg: &SimConfig,
    dt: f64,
) -> Result<PhasePoint, SimError> {
    compute_forces(state, graph, cfg)?;
    let mut next = state.clone();
    let mut lf = Leapfrog::new(state, graph, cfg);
    if !lf.step(&mut next, dt) {
        return Err(SimError::BlowUp { step: 0 });
    }
    Ok(next)
}

/// Integrates with `dt` and records every `sample_every`-th state, starting
/// with `initial`, until `n_samples` states are collected.
pub fn integrate_sampled(
    graph: &InteractionGraph,
    initial: &PhasePoint,
    cfg: &SimConfig,
    dt: f64,
    sample_every: usize,
    n_samples: usize,
    walls: bool,
) -> Result<Vec<PhasePoint>, SimError> {
    compute_forces(initial, graph, cfg)?;
    let mut state = initial.clone();
    let mut lf = Leapfrog::new(&state, graph, cfg);
    if !walls {
        lf = lf.without_walls();
    }
    let mut states = Vec::with_capacity(n_samples);
    if n_samples == 0 {
        return Ok(states);
    }
    states.push(state.clone());
    let mut step = 0;
    while states.len() < n_samples {
        for _ in 0..sample_every {
            step += 1;
            if !lf.step(&mut state, dt) {
                return Err(SimError::BlowUp { step });
            }
        }
        states.push(state.clone());
    }
    Ok(states)
}

/// Records `n_sampled_steps` states; state 0 is the initial condition.
pub fn simulate_trajectory(
    graph: &InteractionGraph,
    initial: &PhasePoint,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    let states = integrate_sampled(
        graph,
        initial,
        cfg,
        cfg.dt_fine,
        cfg.sample_every,
        cfg.n_sampled_steps,
        true,
    )?;
    Ok(Trajectory {
        states,
        graph: graph.clone(),
        effective_dt: cfg.effective_dt(),
    })
}
