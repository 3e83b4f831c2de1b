//! Small control tasks with analytic or exact oracles.
//!
//! * [`Lqr`]: linear dynamics `s' = A s + B a`, quadratic cost, discounted
//!   Riccati solution for the optimal Q-function.
//! * [`Pendulum`]: classic torque-limited swing-up.
//! * [`FiniteMdp`]: tabular MDPs solved by value iteration.
//!
//! Episodes end only at the horizon. [`ReplayBuffer`] is a FIFO ring.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::{blob, Error, Result};

/// Static description of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    /// Nominal observation range, used to normalise hash inputs.
    pub observation_low: Vec<f64>,
    pub observation_high: Vec<f64>,
    pub horizon: usize,
    pub gamma: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.state_dim == 0 || self.action_dim == 0 {
            return bad("state and action dimensions must be positive");
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return bad("action bounds must match the action dimension");
        }
        if self.observation_low.len() != self.state_dim || self.observation_high.len() != self.state_dim {
            return bad("observation bounds must match the state dimension");
        }
        let ordered = |lo: &[f64], hi: &[f64]| lo.iter().zip(hi).all(|(l, h)| l.is_finite() && h.is_finite() && l < h);
        if !ordered(&self.action_low, &self.action_high) || !ordered(&self.observation_low, &self.observation_high) {
            return bad("bounds need finite low < high");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        Ok(())
    }

    /// Hash normalisation bounds for a concatenated `(state, action)`.
    pub fn pair_bounds(&self) -> Vec<(f64, f64)> {
        self.observation_low
            .iter()
            .zip(&self.observation_high)
            .chain(self.action_low.iter().zip(&self.action_high))
            .map(|(l, h)| (*l, *h))
            .collect()
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (l, h))| a.clamp(*l, *h))
            .collect()
    }
}

/// One environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

fn check_action(action: &[f64], spec: &EnvSpec) -> Result<()> {
    if action.len() != spec.action_dim {
        return Err(Error::dims("action", spec.action_dim, action.len()));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("action"));
    }
    Ok(())
}

/// Linear-quadratic regulator constants. Matrices are row-major nested
/// vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqrConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub gamma: f64,
    pub horizon: usize,
    pub action_bound: f64,
    /// Initial states are uniform in `[-init_range, init_range]^d`.
    pub init_range: f64,
}

impl Default for LqrConfig {
    fn default() -> Self {
        Self {
            a: vec![vec![0.9]],
            b: vec![vec![0.5]],
            q: vec![vec![1.0]],
            r: vec![vec![0.1]],
            gamma: 0.99,
            horizon: 50,
            action_bound: 2.0,
            init_range: 1.0,
        }
    }
}

/// Linear dynamics with reward `-(sᵀQs + aᵀRa)`.
#[derive(Debug, Clone)]
pub struct Lqr {
    spec: EnvSpec,
    a: Matrix,
    b: Matrix,
    q: Matrix,
    r: Matrix,
    init_range: f64,
    /// Discounted Riccati fixed point (cost-to-go `sᵀPs`).
    p: Matrix,
    /// Optimal feedback `a = -K s`.
    gain: Matrix,
    state: Vec<f64>,
    t: usize,
}

impl Lqr {
    pub fn new(config: &LqrConfig) -> Result<Self> {
        let a = Matrix::from_rows(&config.a)?;
        let b = Matrix::from_rows(&config.b)?;
        let q = Matrix::from_rows(&config.q)?;
        let r = Matrix::from_rows(&config.r)?;
        let (ds, da) = (a.rows(), b.cols());
        if a.cols() != ds || b.rows() != ds || q.shape() != (ds, ds) || r.shape() != (da, da) {
            return Err(Error::InvalidConfig("LQR matrix shapes are inconsistent".into()));
        }
        if !(config.action_bound > 0.0 && config.init_range > 0.0) {
            return Err(Error::InvalidConfig("LQR action_bound and init_range must be positive".into()));
        }
        let bound = 4.0 * config.init_range;
        let spec = EnvSpec {
            state_dim: ds,
            action_dim: da,
            action_low: vec![-config.action_bound; da],
            action_high: vec![config.action_bound; da],
            observation_low: vec![-bound; ds],
            observation_high: vec![bound; ds],
            horizon: config.horizon,
            gamma: config.gamma,
        };
        spec.validate()?;
        let (p, gain) = riccati(&a, &b, &q, &r, config.gamma)?;
        Ok(Self {
            spec,
            a,
            b,
            q,
            r,
            init_range: config.init_range,
            p,
            gain,
            state: vec![0.0; ds],
            t: 0,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn riccati_solution(&self) -> &Matrix {
        &self.p
    }

    pub fn reset(&mut self, rng: &mut impl Rng) -> Vec<f64> {
        let r = self.init_range;
        self.state = (0..self.spec.state_dim).map(|_| rng.random_range(-r..=r)).collect();
        self.t = 0;
        self.state.clone()
    }

    /// Places the system in `state` at time 0.
    pub fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != self.spec.state_dim {
            return Err(Error::dims("LQR state", self.spec.state_dim, state.len()));
        }
        self.state = state.to_vec();
        self.t = 0;
        Ok(())
    }

    fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        -(quad(&self.q, s) + quad(&self.r, a))
    }

    fn next(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut out = mat_vec(&self.a, s);
        for (o, x) in out.iter_mut().zip(mat_vec(&self.b, a)) {
            *o += x;
        }
        out
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        check_action(action, &self.spec)?;
        let a = self.spec.clip_action(action);
        let reward = self.reward(&self.state, &a);
        self.state = self.next(&self.state, &a);
        self.t += 1;
        Ok(StepOutcome {
            next_state: self.state.clone(),
            reward,
            terminal: self.t >= self.spec.horizon,
        })
    }

    /// `Q*(s, a) = -(sᵀQs + aᵀRa) - γ s'ᵀ P s'` for the unconstrained
    /// infinite-horizon discounted problem.
    pub fn optimal_q(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        if state.len() != self.spec.state_dim || action.len() != self.spec.action_dim {
            return Err(Error::dims(
                "LQR pair",
                format!("{}+{}", self.spec.state_dim, self.spec.action_dim),
                format!("{}+{}", state.len(), action.len()),
            ));
        }
        let sn = self.next(state, action);
        Ok(self.reward(state, action) - self.spec.gamma * quad(&self.p, &sn))
    }

    /// `a* = -(R + γBᵀPB)⁻¹ γBᵀPA s`.
    pub fn optimal_action(&self, state: &[f64]) -> Vec<f64> {
        mat_vec(&self.gain, state).into_iter().map(|x| -x).collect()
    }
}

fn quad(m: &Matrix, x: &[f64]) -> f64 {
    mat_vec(m, x).iter().zip(x).map(|(a, b)| a * b).sum()
}

fn mat_vec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Iterates `P ← Q + γAᵀPA − γ²AᵀPB(R + γBᵀPB)⁻¹BᵀPA` from `P = Q` until the
/// largest entry change is below 1e-10. Returns `(P, K)`.
fn riccati(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, gamma: f64) -> Result<(Matrix, Matrix)> {
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for _ in 0..1_000_000 {
        let pa = p.matmul(a)?;
        let pb = p.matmul(b)?;
        let s = r.add(&bt.matmul(&pb)?.scale(gamma)?)?;
        let gain = s.solve(&bt.matmul(&pa)?.scale(gamma)?)?;
        // Q + γAᵀPA − γ AᵀPB K
        let next = q
            .add(&at.matmul(&pa)?.scale(gamma)?)?
            .sub(&at.matmul(&pb)?.matmul(&gain)?.scale(gamma)?)?;
        let change = next
            .as_slice()
            .iter()
            .zip(p.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        p = next;
        if change < 1e-10 {
            let pa = p.matmul(a)?;
            let pb = p.matmul(b)?;
            let s = r.add(&bt.matmul(&pb)?.scale(gamma)?)?;
            let gain = s.solve(&bt.matmul(&pa)?.scale(gamma)?)?;
            return Ok((p, gain));
        }
    }
    Err(Error::InvalidConfig("discounted Riccati iteration did not converge".into()))
}

/// Pendulum constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumConfig {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_torque: 2.0,
            max_speed: 8.0,
            horizon: 200,
            gamma: 0.99,
        }
    }
}

/// Rod pendulum, angle measured from hanging straight down (so `θ = π` is
/// upright). Observation `[cos θ, sin θ, θ̇]`; reward
/// `-(d² + 0.1 θ̇² + 0.001 u²)` with `d` the wrapped distance to upright.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    config: PendulumConfig,
    theta: f64,
    theta_dot: f64,
    t: usize,
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    pub fn new(config: &PendulumConfig) -> Result<Self> {
        let c = config;
        if [c.gravity, c.mass, c.length, c.dt, c.max_torque, c.max_speed]
            .iter()
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::InvalidConfig("pendulum constants must be positive".into()));
        }
        let spec = EnvSpec {
            state_dim: 3,
            action_dim: 1,
            action_low: vec![-c.max_torque],
            action_high: vec![c.max_torque],
            observation_low: vec![-1.0, -1.0, -c.max_speed],
            observation_high: vec![1.0, 1.0, c.max_speed],
            horizon: c.horizon,
            gamma: c.gamma,
        };
        spec.validate()?;
        Ok(Self {
            spec,
            config: c.clone(),
            theta: 0.0,
            theta_dot: 0.0,
            t: 0,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    /// `(θ, θ̇)`.
    pub fn physical_state(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    pub fn set_physical_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.t = 0;
    }

    pub fn reset(&mut self, rng: &mut impl Rng) -> Vec<f64> {
        self.theta = rng.random_range(-PI..=PI);
        self.theta_dot = rng.random_range(-1.0..=1.0);
        self.t = 0;
        self.observation()
    }

    /// Semi-implicit Euler: velocity first (then clipped), angle with the
    /// new velocity.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        check_action(action, &self.spec)?;
        let c = &self.config;
        let u = action[0].clamp(-c.max_torque, c.max_torque);
        let d = wrap_angle(self.theta - PI);
        let reward = -(d * d + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u);
        let acc = -3.0 * c.gravity / (2.0 * c.length) * self.theta.sin() + 3.0 / (c.mass * c.length * c.length) * u;
        self.theta_dot = (self.theta_dot + acc * c.dt).clamp(-c.max_speed, c.max_speed);
        self.theta += self.theta_dot * c.dt;
        self.t += 1;
        Ok(StepOutcome {
            next_state: self.observation(),
            reward,
            terminal: self.t >= self.spec.horizon,
        })
    }

    /// Mechanical energy of the uniform rod, zero at the pivot height.
    pub fn energy(&self) -> f64 {
        let c = &self.config;
        let inertia = c.mass * c.length * c.length / 3.0;
        0.5 * inertia * self.theta_dot * self.theta_dot - c.mass * c.gravity * c.length / 2.0 * self.theta.cos()
    }
}

/// Environment selection as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvConfig {
    Lqr(LqrConfig),
    Pendulum(PendulumConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Lqr(LqrConfig::default())
    }
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Lqr(_) => "lqr",
            EnvConfig::Pendulum(_) => "pendulum",
        }
    }

    pub fn build(&self) -> Result<Env> {
        Ok(match self {
            EnvConfig::Lqr(c) => Env::Lqr(Lqr::new(c)?),
            EnvConfig::Pendulum(c) => Env::Pendulum(Pendulum::new(c)?),
        })
    }
}

/// Any continuous-control task.
#[derive(Debug, Clone)]
pub enum Env {
    Lqr(Lqr),
    Pendulum(Pendulum),
}

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        match self {
            Env::Lqr(e) => e.spec(),
            Env::Pendulum(e) => e.spec(),
        }
    }

    pub fn reset(&mut self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Env::Lqr(e) => e.reset(rng),
            Env::Pendulum(e) => e.reset(rng),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        match self {
            Env::Lqr(e) => e.step(action),
            Env::Pendulum(e) => e.step(action),
        }
    }

    pub fn as_lqr(&self) -> Result<&Lqr> {
        match self {
            Env::Lqr(e) => Ok(e),
            _ => Err(Error::InvalidArgument("the analytic Q oracle exists only for LQR".into())),
        }
    }
}

/// Tabular MDP with `P[s][a][s']` and `R[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl FiniteMdp {
    pub fn new(transitions: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>, gamma: f64) -> Result<Self> {
        let ns = transitions.len();
        if ns == 0 || rewards.len() != ns {
            return Err(Error::InvalidArgument("finite MDP needs matching non-empty tables".into()));
        }
        let na = rewards[0].len();
        if na == 0 {
            return Err(Error::Empty("finite MDP actions"));
        }
        for s in 0..ns {
            if transitions[s].len() != na || rewards[s].len() != na {
                return Err(Error::InvalidArgument("ragged finite MDP tables".into()));
            }
            for row in &transitions[s] {
                let total: f64 = row.iter().sum();
                if row.len() != ns || row.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument("transition rows must be distributions".into()));
                }
            }
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidArgument("gamma must lie in [0, 1)".into()));
        }
        Ok(Self {
            transitions,
            rewards,
            gamma,
        })
    }

    /// Random dense transitions and rewards uniform in `[-1, 1]`.
    pub fn random(states: usize, actions: usize, gamma: f64, rng: &mut impl Rng) -> Result<Self> {
        let transitions = (0..states)
            .map(|_| {
                (0..actions)
                    .map(|_| {
                        let w: Vec<f64> = (0..states).map(|_| rng.random::<f64>() + 1e-3).collect();
                        let total: f64 = w.iter().sum();
                        w.into_iter().map(|x| x / total).collect()
                    })
                    .collect()
            })
            .collect();
        let rewards = (0..states)
            .map(|_| (0..actions).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        Self::new(transitions, rewards, gamma)
    }

    pub fn states(&self) -> usize {
        self.rewards.len()
    }

    pub fn actions(&self) -> usize {
        self.rewards[0].len()
    }
}

/// Optimal Q table (`states x actions`) by value iteration to a sup-norm
/// residual below 1e-10.
pub fn value_iteration(mdp: &FiniteMdp) -> Matrix {
    let (ns, na) = (mdp.states(), mdp.actions());
    let mut q = vec![0.0; ns * na];
    loop {
        let v: Vec<f64> = (0..ns)
            .map(|s| q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut residual = 0.0f64;
        for s in 0..ns {
            for a in 0..na {
                let ev: f64 = mdp.transitions[s][a].iter().zip(&v).map(|(p, x)| p * x).sum();
                let next = mdp.rewards[s][a] + mdp.gamma * ev;
                residual = residual.max((next - q[s * na + a]).abs());
                q[s * na + a] = next;
            }
        }
        if residual < 1e-10 {
            return Matrix::from_parts(ns, na, q);
        }
    }
}

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    items: Vec<Transition>,
    next: usize,
    inserted: u64,
}

#[derive(Serialize, Deserialize)]
struct BufferHeader {
    format: String,
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    len: usize,
    next: usize,
    inserted: u64,
}

const BUFFER_FORMAT: &str = "lowrank-q-replay/1";

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            state_dim,
            action_dim,
            items: Vec::new(),
            next: 0,
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total transitions ever pushed.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.state_dim, self.action_dim)
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.state.len() != self.state_dim || t.next_state.len() != self.state_dim || t.action.len() != self.action_dim {
            return Err(Error::dims(
                "transition",
                format!("{}/{}", self.state_dim, self.action_dim),
                format!("{}/{}", t.state.len(), t.action.len()),
            ));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
        Ok(())
    }

    /// Storage slot `i` (not chronological once the ring wraps).
    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Oldest first.
    pub fn iter_chronological(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `n` slots drawn uniformly with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::Empty("replay buffer"));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    /// `n` distinct slots.
    pub fn sample_distinct(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if n > self.items.len() {
            return Err(Error::InvalidArgument(format!(
                "buffer holds {} transitions, {} requested",
                self.items.len(),
                n
            )));
        }
        Ok(sample(rng, self.items.len(), n).into_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = BufferHeader {
            format: BUFFER_FORMAT.into(),
            capacity: self.capacity,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            len: self.items.len(),
            next: self.next,
            inserted: self.inserted,
        };
        let mut values = Vec::with_capacity(self.items.len() * (2 * self.state_dim + self.action_dim + 2));
        for t in &self.items {
            values.extend_from_slice(&t.state);
            values.extend_from_slice(&t.action);
            values.push(t.reward);
            values.extend_from_slice(&t.next_state);
            values.push(if t.terminal { 1.0 } else { 0.0 });
        }
        blob::write(path, &header, &values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, values): (BufferHeader, _) = blob::read(path)?;
        let fail = |detail: String| Error::Format { what: "replay buffer", detail };
        if h.format != BUFFER_FORMAT {
            return Err(fail(format!("unknown format {}", h.format)));
        }
        let (ds, da) = (h.state_dim, h.action_dim);
        let width = 2 * ds + da + 2;
        if values.len() != h.len * width || h.len > h.capacity || h.next >= h.capacity.max(1) {
            return Err(fail("inconsistent header".into()));
        }
        let mut buf = Self::new(h.capacity, ds, da)?;
        for row in values.chunks_exact(width) {
            buf.items.push(Transition {
                state: row[..ds].to_vec(),
                action: row[ds..ds + da].to_vec(),
                reward: row[ds + da],
                next_state: row[ds + da + 1..2 * ds + da + 1].to_vec(),
                terminal: row[width - 1] != 0.0,
            });
        }
        buf.next = h.next;
        buf.inserted = h.inserted;
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{approximate_rank, DEFAULT_DELTA};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lqr() -> Lqr {
        Lqr::new(&LqrConfig::default()).unwrap()
    }

    #[test]
    fn lqr_step_example() {
        let mut env = lqr();
        env.set_state(&[1.0]).unwrap();
        let out = env.step(&[0.0]).unwrap();
        assert!((out.next_state[0] - 0.9).abs() < 1e-15);
        assert_eq!(out.reward, -1.0);
        assert!(!out.terminal);
    }

    #[test]
    fn lqr_clips_and_rejects_actions() {
        let mut env = lqr();
        env.set_state(&[0.0]).unwrap();
        let out = env.step(&[10.0]).unwrap();
        assert!((out.next_state[0] - 1.0).abs() < 1e-15);
        assert!((out.reward + 0.4).abs() < 1e-15);
        assert!(env.step(&[f64::NAN]).is_err());
        assert!(env.step(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn horizon_terminates() {
        let mut env = Lqr::new(&LqrConfig {
            horizon: 3,
            ..LqrConfig::default()
        })
        .unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        let flags: Vec<bool> = (0..3).map(|_| env.step(&[0.0]).unwrap().terminal).collect();
        assert_eq!(flags, vec![false, false, true]);
    }

    #[test]
    fn lqr_reset_distribution() {
        let mut env = lqr();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bins = [0usize; 4];
        for _ in 0..4000 {
            let s = env.reset(&mut rng)[0];
            assert!((-1.0..=1.0).contains(&s));
            bins[((s + 1.0) * 2.0).min(3.999) as usize] += 1;
        }
        assert!(bins.iter().all(|b| (850..1150).contains(b)), "{bins:?}");
        let a = lqr().reset(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, lqr().reset(&mut ChaCha8Rng::seed_from_u64(9)));
    }

    #[test]
    fn riccati_matches_scalar_iteration() {
        let env = lqr();
        assert!((env.riccati_solution().get(0, 0) - 1.244595511937872).abs() < 1e-9);
        assert!((env.optimal_action(&[1.0])[0] + 1.3588639552104054).abs() < 1e-9);
        assert!((env.optimal_q(&[0.5], &[-0.3]).unwrap() + 0.3698934601136644).abs() < 1e-9);
        assert_eq!(env.optimal_q(&[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn trivial_dynamics_q_is_state_cost() {
        let env = Lqr::new(&LqrConfig {
            a: vec![vec![0.0]],
            b: vec![vec![0.0]],
            ..LqrConfig::default()
        })
        .unwrap();
        for s in [-1.0, 0.3, 2.0] {
            assert!((env.optimal_q(&[s], &[0.0]).unwrap() + s * s).abs() < 1e-12);
        }
        // B = 0 with R = 0 leaves the gain undetermined.
        assert!(Lqr::new(&LqrConfig {
            b: vec![vec![0.0]],
            r: vec![vec![0.0]],
            ..LqrConfig::default()
        })
        .is_err());
    }

    #[test]
    fn optimal_action_maximises_q() {
        let env = lqr();
        for s in [-1.0, -0.4, 0.2, 0.9] {
            let best = env.optimal_action(&[s])[0];
            let qbest = env.optimal_q(&[s], &[best]).unwrap();
            for k in 0..=400 {
                let a = -2.0 + k as f64 * 0.01;
                assert!(env.optimal_q(&[s], &[a]).unwrap() <= qbest + 1e-12);
            }
        }
    }

    #[test]
    fn exact_lqr_q_matrices_have_low_rank() {
        let env = lqr();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = Matrix::from_fn(64, 64, |i, j| env.optimal_q(&[s[i]], &[a[j]]).unwrap()).unwrap();
            assert!(approximate_rank(&m, DEFAULT_DELTA).unwrap() <= 3);
        }
    }

    #[test]
    fn two_dimensional_lqr_solves() {
        let env = Lqr::new(&LqrConfig {
            a: vec![vec![1.0, 0.1], vec![0.0, 1.0]],
            b: vec![vec![0.0], vec![0.1]],
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![0.1]],
            ..LqrConfig::default()
        })
        .unwrap();
        let s = [0.4, -0.2];
        let best = env.optimal_action(&s)[0];
        let q = env.optimal_q(&s, &[best]).unwrap();
        assert!(env.optimal_q(&s, &[best + 0.05]).unwrap() < q);
        assert!(env.optimal_q(&s, &[best - 0.05]).unwrap() < q);
    }

    #[test]
    fn pendulum_hanging_at_rest_stays() {
        let mut env = Pendulum::new(&PendulumConfig::default()).unwrap();
        env.set_physical_state(0.0, 0.0);
        for _ in 0..50 {
            env.step(&[0.0]).unwrap();
        }
        assert_eq!(env.physical_state(), (0.0, 0.0));
        assert_eq!(env.observation(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn pendulum_reward_at_upright_and_down() {
        let mut env = Pendulum::new(&PendulumConfig::default()).unwrap();
        env.set_physical_state(PI, 0.0);
        assert!(env.step(&[0.0]).unwrap().reward.abs() < 1e-20);
        env.set_physical_state(0.0, 0.0);
        let r = env.step(&[2.0]).unwrap().reward;
        assert!((r + (PI * PI + 0.004)).abs() < 1e-12);
    }

    #[test]
    fn pendulum_stored_trajectory() {
        // Independent reference integration from θ=1, θ̇=0, zero torque.
        let stored = [
            (1, 0.9684448380697038, -0.6311032386059224),
            (2, 0.9059894667439794, -1.2491074265144877),
            (3, 0.8140202473225061, -1.839384388429465),
            (10, -0.33942028043595474, -3.6004144115773866),
            (50, -0.9750000882427514, -1.1602528342336473),
            (200, 0.3163356882434049, 3.623791483580548),
        ];
        let mut env = Pendulum::new(&PendulumConfig::default()).unwrap();
        env.set_physical_state(1.0, 0.0);
        let e0 = env.energy();
        let mut drift = 0.0f64;
        let mut k = 0;
        for t in 1..=200 {
            env.step(&[0.0]).unwrap();
            drift = drift.max((env.energy() - e0).abs());
            if stored[k].0 == t {
                let (th, w) = env.physical_state();
                assert!((th - stored[k].1).abs() < 1e-9 && (w - stored[k].2).abs() < 1e-9, "step {t}");
                k += 1;
            }
        }
        // Semi-implicit Euler oscillates around the true energy without secular growth.
        assert!(drift < 0.25, "{drift}");
    }

    #[test]
    fn pendulum_reset_bounds() {
        let mut env = Pendulum::new(&PendulumConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            env.reset(&mut rng);
            let (th, w) = env.physical_state();
            assert!(th.abs() <= PI && w.abs() <= 1.0);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(-PI) + PI).abs() < 1e-12);
    }

    #[test]
    fn value_iteration_examples() {
        let zero = FiniteMdp::new(vec![vec![vec![0.5, 0.5]; 2]; 2], vec![vec![0.0; 2]; 2], 0.9).unwrap();
        assert!(value_iteration(&zero).is_zero());

        let single = FiniteMdp::new(vec![vec![vec![1.0]; 3]], vec![vec![1.0, -2.0, 0.5]], 0.0).unwrap();
        assert_eq!(value_iteration(&single).row(0), &[1.0, -2.0, 0.5]);

        // Action 0 moves to state 0, action 1 to state 1.
        let go = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let chain = FiniteMdp::new(vec![go.clone(), go], vec![vec![1.0, 0.0], vec![0.0, 2.0]], 0.5).unwrap();
        let q = value_iteration(&chain);
        for (got, want) in q.as_slice().iter().zip([2.0, 2.0, 1.0, 4.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn value_iteration_fixed_point() {
        let mdp = FiniteMdp::random(12, 5, 0.95, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let q = value_iteration(&mdp);
        for s in 0..12 {
            for a in 0..5 {
                let ev: f64 = (0..12)
                    .map(|n| mdp.transitions[s][a][n] * q.row(n).iter().copied().fold(f64::MIN, f64::max))
                    .sum();
                assert!((mdp.rewards[s][a] + 0.95 * ev - q.get(s, a)).abs() < 1e-8);
            }
        }
    }

    fn transition(x: f64) -> Transition {
        Transition {
            state: vec![x],
            action: vec![-x],
            reward: x * 2.0,
            next_state: vec![x + 1.0],
            terminal: x > 3.0,
        }
    }

    #[test]
    fn buffer_fifo_and_capacity() {
        let mut buf = ReplayBuffer::new(3, 1, 1).unwrap();
        for k in 0..5 {
            buf.push(transition(k as f64)).unwrap();
            assert!(buf.len() <= 3);
        }
        let order: Vec<f64> = buf.iter_chronological().map(|t| t.state[0]).collect();
        assert_eq!(order, vec![2.0, 3.0, 4.0]);
        assert_eq!(buf.inserted(), 5);
        assert!(buf.push(Transition {
            state: vec![0.0, 0.0],
            ..transition(0.0)
        })
        .is_err());
    }

    #[test]
    fn buffer_sampling_reproducible() {
        let mut buf = ReplayBuffer::new(100, 1, 1).unwrap();
        for k in 0..50 {
            buf.push(transition(k as f64)).unwrap();
        }
        let a = buf.sample_indices(64, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, buf.sample_indices(64, &mut ChaCha8Rng::seed_from_u64(4)).unwrap());
        let d = buf.sample_distinct(50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut sorted = d.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 50);
        assert!(buf.sample_distinct(51, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn buffer_snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = ReplayBuffer::new(4, 1, 1).unwrap();
        for k in 0..6 {
            buf.push(transition(k as f64 * 0.7)).unwrap();
        }
        let path = dir.path().join("buffer.bin");
        buf.save(&path).unwrap();
        assert_eq!(ReplayBuffer::load(&path).unwrap(), buf);
    }

    #[test]
    fn env_config_json() {
        let cfg: EnvConfig = serde_json::from_str(r#"{"name":"pendulum","horizon":100}"#).unwrap();
        match &cfg {
            EnvConfig::Pendulum(p) => assert_eq!((p.horizon, p.gravity), (100, 10.0)),
            _ => panic!("wrong env"),
        }
        assert_eq!(cfg.build().unwrap().spec().state_dim, 3);
        assert!(serde_json::from_str::<EnvConfig>(r#"{"name":"lqr","bogus":1}"#).is_err());
    }
}
