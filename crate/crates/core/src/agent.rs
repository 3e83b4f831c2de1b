//! DDPG with low-rank Q-matrix reconstruction.
//!
//! Every training step samples a batch of `N` transitions. Besides plain TD
//! learning, a variant may form the `N x N` cross-product Q-matrix of the
//! batch, erase some entries (at random or where the value estimate is most
//! uncertain), re-estimate them with Soft-Impute and use the result either as
//! a regulariser on the online critic (`-E` variants) or as the source of TD
//! targets (`-T` variants).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::completion::{reconstruct, SoftImputeConfig};
use crate::envs::{EnvSpec, Lqr, ReplayBuffer};
use crate::exec::{self, Execution};
use crate::linalg::Matrix;
use crate::nn::{soft_update, Adam, Mlp, OutputActivation};
use crate::rng::{self, StreamRng};
use crate::uncertainty::{
    per_row_count, select_random_per_row, select_top_p_per_row, CountTable, PairGrid, Quantifier, RemovalSet,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "DDPG")]
    Ddpg,
    #[serde(rename = "SVRL-E")]
    SvrlE,
    #[serde(rename = "SVRL-T")]
    SvrlT,
    #[serde(rename = "UALQE-E-CB")]
    UalqeECb,
    #[serde(rename = "UALQE-E-BB")]
    UalqeEBb,
    #[serde(rename = "UALQE-T-CB")]
    UalqeTCb,
    #[serde(rename = "UALQE-T-BB")]
    UalqeTBb,
}

/// Which Q-matrix a variant reconstructs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    /// `Q_θ(s_i, a_j)` from the online critic.
    Evaluation,
    /// `Q_θ̄(s'_i, π_φ̄(s'_j))` from the target networks.
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantifierKind {
    Cb,
    Bb,
}

impl FromStr for QuantifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cb" => Ok(QuantifierKind::Cb),
            "bb" => Ok(QuantifierKind::Bb),
            _ => Err(Error::InvalidArgument(format!("unknown quantifier {s:?} (expected cb or bb)"))),
        }
    }
}

/// How the entries to erase are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemovalRule {
    Random,
    Uncertainty(QuantifierKind),
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Ddpg,
        Variant::SvrlE,
        Variant::SvrlT,
        Variant::UalqeECb,
        Variant::UalqeEBb,
        Variant::UalqeTCb,
        Variant::UalqeTBb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ddpg => "DDPG",
            Variant::SvrlE => "SVRL-E",
            Variant::SvrlT => "SVRL-T",
            Variant::UalqeECb => "UALQE-E-CB",
            Variant::UalqeEBb => "UALQE-E-BB",
            Variant::UalqeTCb => "UALQE-T-CB",
            Variant::UalqeTBb => "UALQE-T-BB",
        }
    }

    pub fn reconstructs(self) -> Option<MatrixKind> {
        match self {
            Variant::Ddpg => None,
            Variant::SvrlE | Variant::UalqeECb | Variant::UalqeEBb => Some(MatrixKind::Evaluation),
            Variant::SvrlT | Variant::UalqeTCb | Variant::UalqeTBb => Some(MatrixKind::Target),
        }
    }

    pub fn removal(self) -> Option<RemovalRule> {
        match self {
            Variant::Ddpg => None,
            Variant::SvrlE | Variant::SvrlT => Some(RemovalRule::Random),
            Variant::UalqeECb | Variant::UalqeTCb => Some(RemovalRule::Uncertainty(QuantifierKind::Cb)),
            Variant::UalqeEBb | Variant::UalqeTBb => Some(RemovalRule::Uncertainty(QuantifierKind::Bb)),
        }
    }

    fn uses(self, kind: QuantifierKind) -> bool {
        self.removal() == Some(RemovalRule::Uncertainty(kind))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub variant: Variant,
    pub batch_size: usize,
    /// Percentage of each Q-matrix row to erase.
    pub p: f64,
    /// Weight of the evaluation-matrix regulariser.
    pub beta: f64,
    pub ensemble_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Gaussian exploration std; defaults to a tenth of the half action range.
    pub exploration_sigma: Option<f64>,
    pub soft_impute: SoftImputeConfig,
    pub hidden_sizes: Vec<usize>,
    /// Bootstrap through time-limit terminations (no terminal mask).
    pub bootstrap_at_horizon: bool,
    pub replay_capacity: usize,
    /// Maintain visit counts and a critic ensemble even when the variant
    /// does not use them, so uncertainty can be inspected afterwards.
    pub track_uncertainty: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ddpg,
            batch_size: 64,
            p: 20.0,
            beta: 0.1,
            ensemble_size: 10,
            gamma: 0.99,
            tau: 0.001,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            exploration_sigma: None,
            soft_impute: SoftImputeConfig::default(),
            hidden_sizes: vec![200, 200],
            bootstrap_at_horizon: true,
            replay_capacity: 100_000,
            track_uncertainty: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if let Err(e) = per_row_count(self.p, self.batch_size) {
            return bad(e.to_string());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.needs_ensemble() && self.ensemble_size < 2 {
            return bad(format!("ensemble_size must be at least 2, got {}", self.ensemble_size));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if let Some(s) = self.exploration_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("exploration_sigma must be non-negative, got {s}"));
            }
        }
        if self.hidden_sizes.iter().any(|h| *h == 0) {
            return bad("hidden sizes must be positive".into());
        }
        if self.replay_capacity < self.batch_size {
            return bad("replay_capacity must hold at least one batch".into());
        }
        self.soft_impute.validate().or_else(|e| bad(e.to_string()))
    }

    pub fn needs_ensemble(&self) -> bool {
        self.variant.uses(QuantifierKind::Bb) || self.track_uncertainty
    }

    pub fn needs_counts(&self) -> bool {
        self.variant.uses(QuantifierKind::Cb) || self.track_uncertainty
    }

    pub fn sigma(&self, spec: &EnvSpec) -> Vec<f64> {
        spec.action_low
            .iter()
            .zip(&spec.action_high)
            .map(|(l, h)| self.exploration_sigma.unwrap_or(0.1 * (h - l) / 2.0))
            .collect()
    }
}

/// Row-wise concatenation of `n` states and `n` actions.
pub fn concat_pairs(states: &[f64], actions: &[f64], n: usize) -> Vec<f64> {
    let ds = states.len() / n.max(1);
    let da = actions.len() / n.max(1);
    let mut out = Vec::with_capacity(n * (ds + da));
    for i in 0..n {
        out.extend_from_slice(&states[i * ds..(i + 1) * ds]);
        out.extend_from_slice(&actions[i * da..(i + 1) * da]);
    }
    out
}

/// `N` transitions laid out row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub terminals: Vec<bool>,
}

impl Batch {
    pub fn from_buffer(buffer: &ReplayBuffer, indices: &[usize]) -> Self {
        let (ds, da) = buffer.dims();
        let mut b = Batch {
            state_dim: ds,
            action_dim: da,
            states: Vec::with_capacity(indices.len() * ds),
            actions: Vec::with_capacity(indices.len() * da),
            rewards: Vec::with_capacity(indices.len()),
            next_states: Vec::with_capacity(indices.len() * ds),
            terminals: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let t = buffer.get(i);
            b.states.extend_from_slice(&t.state);
            b.actions.extend_from_slice(&t.action);
            b.rewards.push(t.reward);
            b.next_states.extend_from_slice(&t.next_state);
            b.terminals.push(t.terminal);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn critic_inputs(&self) -> Vec<f64> {
        concat_pairs(&self.states, &self.actions, self.len())
    }

    /// Multiplier on the bootstrap term of transition `i`.
    fn continuation(&self, i: usize, bootstrap_at_horizon: bool) -> f64 {
        if self.terminals[i] && !bootstrap_at_horizon {
            0.0
        } else {
            1.0
        }
    }
}

/// `r + γ·Q_θ̄(s', π_φ̄(s'))` per transition.
pub fn td_targets(
    batch: &Batch,
    target_critic: &Mlp,
    target_actor: &Mlp,
    gamma: f64,
    bootstrap_at_horizon: bool,
) -> Result<Vec<f64>> {
    let n = batch.len();
    let next_actions = target_actor.forward_batch(&batch.next_states, n)?;
    let next_q = target_critic.forward_batch(&concat_pairs(&batch.next_states, &next_actions, n), n)?;
    Ok((0..n)
        .map(|i| batch.rewards[i] + gamma * batch.continuation(i, bootstrap_at_horizon) * next_q[i])
        .collect())
}

/// Mean squared error of `net(inputs)` against constant `targets`, with the
/// parameter gradient.
pub fn regression_loss(net: &Mlp, inputs: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::Empty("regression batch"));
    }
    let tape = net.forward_tape(inputs, n)?;
    let mut loss = 0.0;
    let mut upstream = vec![0.0; n];
    for i in 0..n {
        let d = tape.output[i] - targets[i];
        loss += d * d;
        upstream[i] = 2.0 * d / n as f64;
    }
    let grads = net.backward(&tape, &upstream)?;
    Ok((loss / n as f64, grads.params))
}

/// TD loss of `critic` on `batch`; targets are constants.
pub fn td_loss(
    batch: &Batch,
    critic: &Mlp,
    target_critic: &Mlp,
    target_actor: &Mlp,
    gamma: f64,
    bootstrap_at_horizon: bool,
) -> Result<(f64, Vec<f64>)> {
    let y = td_targets(batch, target_critic, target_actor, gamma, bootstrap_at_horizon)?;
    regression_loss(critic, &batch.critic_inputs(), &y)
}

/// Deterministic policy gradient of the batch-mean `Q(s, π(s))`.
#[derive(Debug, Clone)]
pub struct PolicyGradient {
    pub mean_q: f64,
    /// Ascent direction on the actor parameters.
    pub params: Vec<f64>,
    /// `∂Q/∂a` at `a = π(s)`, `N x action_dim`.
    pub action_grad: Vec<f64>,
}

pub fn policy_gradient(states: &[f64], n: usize, actor: &Mlp, critic: &Mlp) -> Result<PolicyGradient> {
    let da = actor.output_dim();
    let ds = actor.input_dim();
    let atape = actor.forward_tape(states, n)?;
    let ctape = critic.forward_tape(&concat_pairs(states, &atape.output, n), n)?;
    let mean_q = ctape.output.iter().sum::<f64>() / n as f64;
    let cg = critic.backward(&ctape, &vec![1.0 / n as f64; n])?;
    let width = ds + da;
    let mut action_grad = Vec::with_capacity(n * da);
    for i in 0..n {
        action_grad.extend_from_slice(&cg.input[i * width + ds..(i + 1) * width]);
    }
    let ag = actor.backward(&atape, &action_grad)?;
    Ok(PolicyGradient {
        mean_q,
        params: ag.params,
        action_grad: action_grad.iter().map(|g| g * n as f64).collect(),
    })
}

/// Anything that can fill a Q-matrix over a grid of pairs.
pub trait QFunction: Sync {
    fn q_values(&self, grid: &PairGrid, exec: Execution) -> Result<Matrix>;
}

impl QFunction for Mlp {
    fn q_values(&self, grid: &PairGrid, exec: Execution) -> Result<Matrix> {
        let n = grid.rows() * grid.cols();
        let out = self.forward_batch_exec(&grid.pair_inputs(), n, exec)?;
        Matrix::new(grid.rows(), grid.cols(), out)
    }
}

impl QFunction for Lqr {
    fn q_values(&self, grid: &PairGrid, _exec: Execution) -> Result<Matrix> {
        Matrix::from_fn(grid.rows(), grid.cols(), |i, j| {
            self.optimal_q(grid.state(i), grid.action(j)).unwrap_or(f64::NAN)
        })
    }
}

/// Exact Q table of a finite MDP; states and actions are encoded as their
/// index in a one-element vector.
#[derive(Debug, Clone)]
pub struct TabularQ(pub Matrix);

impl QFunction for TabularQ {
    fn q_values(&self, grid: &PairGrid, _exec: Execution) -> Result<Matrix> {
        let index = |v: &[f64], bound: usize| -> Result<usize> {
            let k = v[0];
            if v.len() != 1 || k < 0.0 || k.fract() != 0.0 || k as usize >= bound {
                return Err(Error::InvalidArgument(format!("bad tabular index {v:?}")));
            }
            Ok(k as usize)
        };
        let rows: Vec<usize> = (0..grid.rows()).map(|i| index(grid.state(i), self.0.rows())).collect::<Result<_>>()?;
        let cols: Vec<usize> = (0..grid.cols()).map(|j| index(grid.action(j), self.0.cols())).collect::<Result<_>>()?;
        Matrix::from_fn(grid.rows(), grid.cols(), |i, j| self.0.get(rows[i], cols[j]))
    }
}

/// A sampled Q-matrix with its `(state, action)` labels.
#[derive(Debug, Clone)]
pub struct QMatrixPair {
    pub matrix: Matrix,
    pub grid: PairGrid,
    pub kind: MatrixKind,
}

/// Evaluation kind: `Q_θ(s_i, a_j)` with `critic` the online critic.
/// Target kind: `Q_θ̄(s'_i, π_φ̄(s'_j))` with `critic`/`actor` the targets.
pub fn build_q_matrix(
    batch: &Batch,
    kind: MatrixKind,
    critic: &Mlp,
    target_actor: &Mlp,
    exec: Execution,
) -> Result<QMatrixPair> {
    let n = batch.len();
    let grid = match kind {
        MatrixKind::Evaluation => PairGrid::new(batch.state_dim, batch.action_dim, batch.states.clone(), batch.actions.clone())?,
        MatrixKind::Target => {
            let next_actions = target_actor.forward_batch(&batch.next_states, n)?;
            PairGrid::new(batch.state_dim, batch.action_dim, batch.next_states.clone(), next_actions)?
        }
    };
    let matrix = critic.q_values(&grid, exec)?;
    Ok(QMatrixPair { matrix, grid, kind })
}

/// Entries to erase from `qpair` under `rule`. Uncertainty rules score the
/// pair labels with `quantifier`.
pub fn choose_removal(
    qpair: &QMatrixPair,
    rule: RemovalRule,
    p: f64,
    quantifier: Option<Quantifier<'_>>,
    rng: &mut impl Rng,
    exec: Execution,
) -> Result<RemovalSet> {
    let (rows, cols) = qpair.matrix.shape();
    if per_row_count(p, cols)? == 0 {
        return Ok(RemovalSet::empty(rows, cols));
    }
    match rule {
        RemovalRule::Random => select_random_per_row(rows, cols, p, rng),
        RemovalRule::Uncertainty(_) => {
            let q = quantifier.ok_or_else(|| Error::InvalidArgument("uncertainty removal needs a quantifier".into()))?;
            select_top_p_per_row(&q.score(&qpair.grid, exec)?, p)
        }
    }
}

/// `r_i + γ·ℚ_T(i, i)`; off-diagonal entries are unused.
pub fn reconstructed_targets(batch: &Batch, reconstructed: &Matrix, gamma: f64, bootstrap_at_horizon: bool) -> Vec<f64> {
    (0..batch.len())
        .map(|i| batch.rewards[i] + gamma * batch.continuation(i, bootstrap_at_horizon) * reconstructed.get(i, i))
        .collect()
}

/// Mean over all entries of `(Q̃_E − ℚ_E)²`, with `∂/∂Q̃_E` per entry.
pub fn loss_e(evaluation: &Matrix, reconstructed: &Matrix) -> Result<(f64, Vec<f64>)> {
    if evaluation.shape() != reconstructed.shape() {
        return Err(Error::dims(
            "regulariser",
            format!("{:?}", evaluation.shape()),
            format!("{:?}", reconstructed.shape()),
        ));
    }
    let n = evaluation.as_slice().len() as f64;
    let mut loss = 0.0;
    let grad = evaluation
        .as_slice()
        .iter()
        .zip(reconstructed.as_slice())
        .map(|(q, r)| {
            let d = q - r;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// K critics with their own targets and optimisers.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Mlp>,
    pub targets: Vec<Mlp>,
    pub optimizers: Vec<Adam>,
}

impl Ensemble {
    pub fn new(k: usize, sizes: &[usize], learning_rate: f64, seed: u64) -> Result<Self> {
        let members: Vec<Mlp> = (0..k)
            .map(|i| Mlp::new(sizes, OutputActivation::Identity, &mut rng::indexed_stream(seed, "ensemble", i as u64)))
            .collect::<Result<_>>()?;
        let optimizers = members.iter().map(|m| Adam::new(m.params().len(), learning_rate)).collect();
        Ok(Self {
            targets: members.clone(),
            members,
            optimizers,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// One TD step per member on the shared batch; each member bootstraps
    /// from its own target with next actions `next_actions`.
    pub fn update(
        &mut self,
        batch: &Batch,
        next_actions: &[f64],
        gamma: f64,
        tau: f64,
        bootstrap_at_horizon: bool,
        exec: Execution,
    ) -> Result<()> {
        let n = batch.len();
        let next_inputs = concat_pairs(&batch.next_states, next_actions, n);
        let inputs = batch.critic_inputs();
        let mut slots: Vec<(&mut Mlp, &mut Mlp, &mut Adam)> = self
            .members
            .iter_mut()
            .zip(self.targets.iter_mut())
            .zip(self.optimizers.iter_mut())
            .map(|((m, t), o)| (m, t, o))
            .collect();
        let mut results: Vec<Result<()>> = (0..slots.len()).map(|_| Ok(())).collect();
        let mut work: Vec<_> = slots.iter_mut().zip(results.iter_mut()).collect();
        exec::for_each_mut(&mut work, exec, |_, (slot, res)| {
            let (member, target, opt) = slot;
            **res = (|| {
                let next_q = target.forward_batch(&next_inputs, n)?;
                let y: Vec<f64> = (0..n)
                    .map(|i| batch.rewards[i] + gamma * batch.continuation(i, bootstrap_at_horizon) * next_q[i])
                    .collect();
                let (_, g) = regression_loss(member, &inputs, &y)?;
                opt.step(member.params_mut(), &g)?;
                soft_update(target, member, tau)
            })();
        });
        results.into_iter().collect()
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepMetrics {
    pub critic_loss: f64,
    pub regularizer: f64,
    pub actor_mean_q: f64,
    pub removed: usize,
    pub completion_iterations: usize,
    pub completion_converged: bool,
}

/// Full learner state.
#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    spec: EnvSpec,
    seed: u64,
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    ensemble: Option<Ensemble>,
    counts: Option<CountTable>,
    sample_rng: StreamRng,
    removal_rng: StreamRng,
    noise_rng: StreamRng,
    train_steps: u64,
    critic_updates: u64,
    exec: Execution,
}

#[derive(Serialize, Deserialize)]
struct AgentHeader {
    format: String,
    config: AgentConfig,
    spec: EnvSpec,
    seed: u64,
    train_steps: u64,
    critic_updates: u64,
    /// Stream positions, as decimal strings of 128-bit word counters.
    rng_positions: BTreeMap<String, String>,
}

const AGENT_FORMAT: &str = "lowrank-q-agent/1";

impl Agent {
    pub fn new(config: AgentConfig, spec: EnvSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let (ds, da) = (spec.state_dim, spec.action_dim);
        let mut actor_sizes = vec![ds];
        actor_sizes.extend(&config.hidden_sizes);
        actor_sizes.push(da);
        let mut critic_sizes = vec![ds + da];
        critic_sizes.extend(&config.hidden_sizes);
        critic_sizes.push(1);
        let bounded = OutputActivation::Bounded {
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
        };
        let actor = Mlp::new(&actor_sizes, bounded, &mut rng::stream(seed, "actor_init"))?;
        let critic = Mlp::new(&critic_sizes, OutputActivation::Identity, &mut rng::stream(seed, "critic_init"))?;
        let ensemble = if config.needs_ensemble() {
            Some(Ensemble::new(config.ensemble_size, &critic_sizes, config.critic_lr, seed)?)
        } else {
            None
        };
        let counts = if config.needs_counts() {
            Some(CountTable::with_bounds(ds, da, seed, spec.pair_bounds())?)
        } else {
            None
        };
        Ok(Self {
            actor_opt: Adam::new(actor.params().len(), config.actor_lr),
            critic_opt: Adam::new(critic.params().len(), config.critic_lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            ensemble,
            counts,
            sample_rng: rng::stream(seed, "sample"),
            removal_rng: rng::stream(seed, "removal"),
            noise_rng: rng::stream(seed, "noise"),
            train_steps: 0,
            critic_updates: 0,
            exec: Execution::default(),
            config,
            spec,
            seed,
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    /// Critic networks advanced so far (the primal critic plus every
    /// ensemble member, per step).
    pub fn critic_updates(&self) -> u64 {
        self.critic_updates
    }

    pub fn ensemble(&self) -> Option<&Ensemble> {
        self.ensemble.as_ref()
    }

    pub fn counts(&self) -> Option<&CountTable> {
        self.counts.as_ref()
    }

    pub fn quantifier(&self, kind: QuantifierKind) -> Option<Quantifier<'_>> {
        match kind {
            QuantifierKind::Cb => self.counts.as_ref().map(Quantifier::Counts),
            QuantifierKind::Bb => self.ensemble.as_ref().map(|e| Quantifier::Ensemble(&e.members)),
        }
    }

    /// Greedy action `π_φ(s)`.
    pub fn policy_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.actor.forward(state)
    }

    /// Greedy action plus clipped Gaussian exploration noise.
    pub fn explore_action(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        let mut a = self.actor.forward(state)?;
        for (x, s) in a.iter_mut().zip(self.config.sigma(&self.spec)) {
            let z: f64 = self.noise_rng.sample(StandardNormal);
            *x += s * z;
        }
        Ok(self.spec.clip_action(&a))
    }

    /// One gradient step on a batch sampled from `buffer`.
    pub fn train_step(&mut self, buffer: &ReplayBuffer) -> Result<StepMetrics> {
        let n = self.config.batch_size;
        if buffer.len() < n {
            return Err(Error::InvalidArgument(format!(
                "buffer holds {} transitions, batch needs {n}",
                buffer.len()
            )));
        }
        let cfg = self.config.clone();
        let idx = buffer.sample_indices(n, &mut self.sample_rng)?;
        let batch = Batch::from_buffer(buffer, &idx);
        let mut metrics = StepMetrics {
            completion_converged: true,
            ..StepMetrics::default()
        };

        let inputs = batch.critic_inputs();
        let targets = match (cfg.variant.reconstructs(), cfg.variant.removal()) {
            (Some(MatrixKind::Target), Some(rule)) => {
                let qpair = build_q_matrix(&batch, MatrixKind::Target, &self.critic_target, &self.actor_target, self.exec)?;
                let removal = self.removal(&qpair, rule)?;
                let rec = self.complete(&qpair, &removal, &mut metrics)?;
                reconstructed_targets(&batch, &rec, cfg.gamma, cfg.bootstrap_at_horizon)
            }
            _ => td_targets(
                &batch,
                &self.critic_target,
                &self.actor_target,
                cfg.gamma,
                cfg.bootstrap_at_horizon,
            )?,
        };
        let (loss, mut grads) = regression_loss(&self.critic, &inputs, &targets)?;
        metrics.critic_loss = loss;

        if let (Some(MatrixKind::Evaluation), Some(rule)) = (cfg.variant.reconstructs(), cfg.variant.removal()) {
            if per_row_count(cfg.p, n)? > 0 {
                let qpair = build_q_matrix(&batch, MatrixKind::Evaluation, &self.critic, &self.actor_target, self.exec)?;
                let removal = self.removal(&qpair, rule)?;
                let rec = self.complete(&qpair, &removal, &mut metrics)?;
                let (reg, upstream) = loss_e(&qpair.matrix, &rec)?;
                metrics.regularizer = reg;
                self.add_regularizer_grad(&qpair, &upstream, cfg.beta, &mut grads)?;
            }
        }
        self.critic_opt.step(self.critic.params_mut(), &grads)?;
        self.critic_updates += 1;

        let pg = policy_gradient(&batch.states, n, &self.actor, &self.critic)?;
        let descent: Vec<f64> = pg.params.iter().map(|g| -g).collect();
        self.actor_opt.step(self.actor.params_mut(), &descent)?;
        metrics.actor_mean_q = pg.mean_q;

        soft_update(&mut self.critic_target, &self.critic, cfg.tau)?;
        soft_update(&mut self.actor_target, &self.actor, cfg.tau)?;

        if let Some(counts) = self.counts.as_mut() {
            for i in 0..n {
                counts.record_visit(
                    &batch.states[i * batch.state_dim..(i + 1) * batch.state_dim],
                    &batch.actions[i * batch.action_dim..(i + 1) * batch.action_dim],
                )?;
            }
        }
        if let Some(ensemble) = self.ensemble.as_mut() {
            let next_actions = self.actor_target.forward_batch(&batch.next_states, n)?;
            ensemble.update(&batch, &next_actions, cfg.gamma, cfg.tau, cfg.bootstrap_at_horizon, self.exec)?;
            self.critic_updates += ensemble.len() as u64;
        }
        self.train_steps += 1;
        Ok(metrics)
    }

    fn removal(&mut self, qpair: &QMatrixPair, rule: RemovalRule) -> Result<RemovalSet> {
        let quantifier = match rule {
            RemovalRule::Random => None,
            RemovalRule::Uncertainty(kind) => match kind {
                QuantifierKind::Cb => self.counts.as_ref().map(Quantifier::Counts),
                QuantifierKind::Bb => self.ensemble.as_ref().map(|e| Quantifier::Ensemble(&e.members)),
            },
        };
        choose_removal(qpair, rule, self.config.p, quantifier, &mut self.removal_rng, self.exec)
    }

    fn complete(&self, qpair: &QMatrixPair, removal: &RemovalSet, metrics: &mut StepMetrics) -> Result<Matrix> {
        let out = reconstruct(&qpair.matrix, removal.entries(), &self.config.soft_impute)?;
        metrics.removed += removal.len();
        metrics.completion_iterations += out.iterations;
        metrics.completion_converged &= out.converged;
        Ok(out.matrix)
    }

    /// Adds `β·∂L_E/∂θ`; only entries with a non-zero upstream contribute.
    fn add_regularizer_grad(&self, qpair: &QMatrixPair, upstream: &[f64], beta: f64, grads: &mut [f64]) -> Result<()> {
        let cols = qpair.grid.cols();
        let mut inputs = Vec::new();
        let mut up = Vec::new();
        for (e, g) in upstream.iter().enumerate() {
            if *g != 0.0 {
                let (i, j) = (e / cols, e % cols);
                inputs.extend_from_slice(qpair.grid.state(i));
                inputs.extend_from_slice(qpair.grid.action(j));
                up.push(beta * g);
            }
        }
        if up.is_empty() {
            return Ok(());
        }
        let tape = self.critic.forward_tape(&inputs, up.len())?;
        let g = self.critic.backward(&tape, &up)?;
        for (a, b) in grads.iter_mut().zip(&g.params) {
            *a += b;
        }
        Ok(())
    }

    /// Writes every network, optimiser, the count table and the counters
    /// into directory `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let counters: BTreeMap<String, u64> = [
            ("train_steps".to_string(), self.train_steps),
            ("critic_updates".to_string(), self.critic_updates),
        ]
        .into();
        self.actor.save(&dir.join("actor.bin"), &counters)?;
        self.critic.save(&dir.join("critic.bin"), &counters)?;
        self.actor_target.save(&dir.join("actor_target.bin"), &counters)?;
        self.critic_target.save(&dir.join("critic_target.bin"), &counters)?;
        self.actor_opt.save(&dir.join("actor_adam.bin"))?;
        self.critic_opt.save(&dir.join("critic_adam.bin"))?;
        if let Some(e) = &self.ensemble {
            for k in 0..e.len() {
                e.members[k].save(&dir.join(format!("ensemble_{k}.bin")), &counters)?;
                e.targets[k].save(&dir.join(format!("ensemble_target_{k}.bin")), &counters)?;
                e.optimizers[k].save(&dir.join(format!("ensemble_adam_{k}.bin")))?;
            }
        }
        if let Some(c) = &self.counts {
            c.save(&dir.join("counts.json"))?;
        }
        let positions = [
            ("sample", &self.sample_rng),
            ("removal", &self.removal_rng),
            ("noise", &self.noise_rng),
        ]
        .into_iter()
        .map(|(k, r)| (k.to_string(), r.get_word_pos().to_string()))
        .collect();
        let header = AgentHeader {
            format: AGENT_FORMAT.into(),
            config: self.config.clone(),
            spec: self.spec.clone(),
            seed: self.seed,
            train_steps: self.train_steps,
            critic_updates: self.critic_updates,
            rng_positions: positions,
        };
        let path = dir.join("agent.json");
        std::fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("agent.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let h: AgentHeader = serde_json::from_str(&text)?;
        if h.format != AGENT_FORMAT {
            return Err(Error::Format {
                what: "agent checkpoint",
                detail: format!("unknown format {}", h.format),
            });
        }
        let mut agent = Agent::new(h.config, h.spec, h.seed)?;
        agent.actor = Mlp::load(&dir.join("actor.bin"))?.0;
        agent.critic = Mlp::load(&dir.join("critic.bin"))?.0;
        agent.actor_target = Mlp::load(&dir.join("actor_target.bin"))?.0;
        agent.critic_target = Mlp::load(&dir.join("critic_target.bin"))?.0;
        agent.actor_opt = Adam::load(&dir.join("actor_adam.bin"))?;
        agent.critic_opt = Adam::load(&dir.join("critic_adam.bin"))?;
        if let Some(e) = agent.ensemble.as_mut() {
            for k in 0..e.len() {
                e.members[k] = Mlp::load(&dir.join(format!("ensemble_{k}.bin")))?.0;
                e.targets[k] = Mlp::load(&dir.join(format!("ensemble_target_{k}.bin")))?.0;
                e.optimizers[k] = Adam::load(&dir.join(format!("ensemble_adam_{k}.bin")))?;
            }
        }
        if agent.counts.is_some() {
            agent.counts = Some(CountTable::load(&dir.join("counts.json"))?);
        }
        for (name, rng) in [
            ("sample", &mut agent.sample_rng),
            ("removal", &mut agent.removal_rng),
            ("noise", &mut agent.noise_rng),
        ] {
            let pos: u128 = h
                .rng_positions
                .get(name)
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Format {
                    what: "agent checkpoint",
                    detail: format!("missing stream position {name}"),
                })?;
            rng.set_word_pos(pos);
        }
        agent.train_steps = h.train_steps;
        agent.critic_updates = h.critic_updates;
        Ok(agent)
    }

    /// Structural equality of every learned quantity and counter.
    pub fn same_state(&self, other: &Agent) -> bool {
        self.actor == other.actor
            && self.critic == other.critic
            && self.actor_target == other.actor_target
            && self.critic_target == other.critic_target
            && self.actor_opt == other.actor_opt
            && self.critic_opt == other.critic_opt
            && self.ensemble == other.ensemble
            && self.counts == other.counts
            && self.train_steps == other.train_steps
            && self.critic_updates == other.critic_updates
            && self.sample_rng == other.sample_rng
            && self.removal_rng == other.removal_rng
            && self.noise_rng == other.noise_rng
    }
}
