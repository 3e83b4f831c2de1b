//! Experiment runner and analysis tools.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/config.json           the experiment as given
//! <out>/report.json           final returns per seed
//! <out>/seed_<s>/config.json  the same experiment restricted to seed s
//! <out>/seed_<s>/metrics.csv  one row per evaluation point
//! <out>/seed_<s>/timing.csv   measured wall time per evaluation point
//! <out>/seed_<s>/checkpoints/step_<k>/  agent files plus buffer.bin
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, QFunction, Variant};
use crate::completion::{reconstruct, SoftImputeConfig};
use crate::envs::{EnvConfig, ReplayBuffer, Transition};
use crate::exec::{map_indexed, Execution};
use crate::linalg::{approximate_rank, Matrix};
use crate::rng;
use crate::uncertainty::{PairGrid, Quantifier, UncertaintyMatrix};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BUFFER_FILE: &str = "buffer.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankScanConfig {
    /// Matrices per scan; 0 disables scanning (arank columns become NaN).
    pub num_matrices: usize,
    pub matrix_size: usize,
    pub delta: f64,
}

impl Default for RankScanConfig {
    fn default() -> Self {
        Self {
            num_matrices: 100,
            matrix_size: 64,
            delta: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Environment steps taken with uniformly random actions before the
    /// first update.
    pub learning_starts: u64,
    /// Defer updates to the end of each episode and then take one per
    /// training-eligible step of that episode, instead of one per step.
    pub episodic_updates: bool,
    pub rank_scan: RankScanConfig,
    pub seeds: Vec<u64>,
    /// Put measured seconds into the `wall_time` column. Off by default so
    /// that metrics.csv is reproducible; timing.csv always has them.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            total_steps: 30_000,
            eval_interval: 1_000,
            eval_episodes: 5,
            learning_starts: 1_000,
            episodic_updates: false,
            rank_scan: RankScanConfig::default(),
            seeds: vec![0, 1, 2],
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.agent.validate()?;
        let env = self.env.build()?;
        let spec = env.spec();
        if spec.gamma != self.agent.gamma {
            return bad(format!(
                "environment gamma {} differs from agent gamma {}",
                spec.gamma, self.agent.gamma
            ));
        }
        if self.eval_interval == 0 || self.total_steps % self.eval_interval != 0 {
            return bad(format!(
                "eval_interval {} must be positive and divide total_steps {}",
                self.eval_interval, self.total_steps
            ));
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let scan = &self.rank_scan;
        if !(0.0..1.0).contains(&scan.delta) {
            return bad(format!("rank_scan.delta must lie in [0, 1), got {}", scan.delta));
        }
        if scan.num_matrices > 0 && (scan.matrix_size == 0 || scan.matrix_size > self.agent.replay_capacity) {
            return bad(format!(
                "rank_scan.matrix_size {} must lie in 1..={}",
                scan.matrix_size, self.agent.replay_capacity
            ));
        }
        Ok(())
    }

    /// The same experiment restricted to one seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        Self {
            seeds: vec![seed],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub average_return: f64,
    pub arank_mean: f64,
    pub arank_std: f64,
    pub wall_time: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        what: "csv file",
        detail: format!("{}: {e}", path.display()),
    }
}

/// Mean undiscounted return of `policy` over `episodes` episodes. Episode
/// `e` starts from a state drawn from stream `("eval", e)` of `seed`, so
/// every policy evaluated with the same seed faces the same start states.
pub fn evaluate_policy(
    env: &EnvConfig,
    episodes: usize,
    seed: u64,
    mut policy: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("at least one evaluation episode is required".into()));
    }
    let mut total = 0.0;
    for e in 0..episodes {
        let mut env = env.build()?;
        let mut state = env.reset(&mut rng::indexed_stream(seed, "eval", e as u64));
        loop {
            let out = env.step(&policy(&state)?)?;
            total += out.reward;
            if out.terminal {
                break;
            }
            state = out.next_state;
        }
    }
    Ok(total / episodes as f64)
}

/// Return of the Riccati-optimal linear policy on LQR, evaluated like
/// [`evaluate_policy`]. `None` for tasks without an analytic optimum.
pub fn optimal_return(env: &EnvConfig, episodes: usize, seed: u64) -> Result<Option<f64>> {
    let built = env.build()?;
    let Ok(lqr) = built.as_lqr() else {
        return Ok(None);
    };
    let lqr = lqr.clone();
    evaluate_policy(env, episodes, seed, |s| Ok(lqr.optimal_action(s))).map(Some)
}

/// `count` grids whose rows are `size` distinct buffer states and whose
/// columns are the actions of another `size` distinct transitions.
pub fn sample_grids(buffer: &ReplayBuffer, count: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<PairGrid>> {
    if size == 0 {
        return Err(Error::InvalidArgument("matrix size must be positive".into()));
    }
    let (ds, da) = buffer.dims();
    (0..count)
        .map(|_| {
            let rows = buffer.sample_distinct(size, rng)?;
            let cols = buffer.sample_distinct(size, rng)?;
            let states = rows.iter().flat_map(|&i| buffer.get(i).state.iter().copied()).collect();
            let actions = cols.iter().flat_map(|&j| buffer.get(j).action.iter().copied()).collect();
            PairGrid::new(ds, da, states, actions)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankScan {
    pub aranks: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

impl RankScan {
    fn from_ranks(aranks: Vec<usize>) -> Self {
        let n = aranks.len() as f64;
        let mean = aranks.iter().sum::<usize>() as f64 / n;
        let var = aranks.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
        Self {
            aranks,
            mean,
            std: var.sqrt(),
        }
    }

    /// `(arank, count)` for every arank that occurs, ascending.
    pub fn histogram(&self) -> Vec<(usize, usize)> {
        let mut h = BTreeMap::new();
        for &r in &self.aranks {
            *h.entry(r).or_insert(0) += 1;
        }
        h.into_iter().collect()
    }

    pub fn write_histogram(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["arank", "count"]).map_err(|e| csv_error(path, e))?;
        for (r, c) in self.histogram() {
            w.write_record([r.to_string(), c.to_string()]).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Approximate rank of `q` over every grid. Matrices may be evaluated
/// concurrently; results keep the grid order.
pub fn rank_scan<Q: QFunction + ?Sized>(q: &Q, grids: &[PairGrid], delta: f64, exec: Execution) -> Result<RankScan> {
    if grids.is_empty() {
        return Err(Error::Empty("rank scan"));
    }
    let ranks = map_indexed(grids.len(), exec, |k| {
        let m = q.q_values(&grids[k], Execution::Sequential)?;
        approximate_rank(&m, delta)
    });
    Ok(RankScan::from_ranks(ranks.into_iter().collect::<Result<_>>()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub u_mean: f64,
    pub u_std: f64,
    pub arank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
    /// Spearman coefficient between `arank` and `u_mean`; `None` when either
    /// column is constant.
    pub spearman: Option<f64>,
}

impl CorrelationReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Per grid: the uncertainty mean and std over its pairs and the arank of
/// `q` on it, plus the rank correlation of arank against uncertainty.
pub fn correlate<Q: QFunction + ?Sized>(
    q: &Q,
    quantifier: &Quantifier<'_>,
    grids: &[PairGrid],
    delta: f64,
    exec: Execution,
) -> Result<CorrelationReport> {
    if grids.is_empty() {
        return Err(Error::Empty("correlation sample"));
    }
    let rows = map_indexed(grids.len(), exec, |k| {
        let m = q.q_values(&grids[k], Execution::Sequential)?;
        let u = quantifier.score(&grids[k], Execution::Sequential)?;
        Ok(CorrelationRow {
            u_mean: u.mean(),
            u_std: u.std(),
            arank: approximate_rank(&m, delta)?,
        })
    });
    let rows: Vec<CorrelationRow> = rows.into_iter().collect::<Result<_>>()?;
    let u: Vec<f64> = rows.iter().map(|r| r.u_mean).collect();
    let a: Vec<f64> = rows.iter().map(|r| r.arank as f64).collect();
    Ok(CorrelationReport {
        spearman: spearman(&a, &u)?,
        rows,
    })
}

/// Ranks starting at 1; tied values share the average of their ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either sample has no spread.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::dims("spearman", x.len(), y.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

/// One sampled Q-matrix from `agent`'s critic with its uncertainty matrix.
pub fn uncertainty_scan(
    agent: &Agent,
    quantifier: &Quantifier<'_>,
    buffer: &ReplayBuffer,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Matrix, UncertaintyMatrix)> {
    let grid = sample_grids(buffer, 1, size, rng)?.remove(0);
    let q = agent.critic.q_values(&grid, Execution::default())?;
    let u = quantifier.score(&grid, Execution::default())?;
    Ok((q, u))
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Format {
                    what: "matrix csv",
                    detail: format!("{}: not a number: {f:?}", path.display()),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("matrix csv"));
    }
    Matrix::from_rows(&rows)
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string())).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `row,col` pairs, zero-based, one per line. A leading `row,col` header is
/// allowed; an empty file means no removals.
pub fn read_removals_csv(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if k == 0 && record.iter().eq(["row", "col"]) {
            continue;
        }
        let fields: Vec<&str> = record.iter().collect();
        let parsed = match fields.as_slice() {
            [r, c] => r.parse().ok().zip(c.parse().ok()),
            _ => None,
        };
        out.push(parsed.ok_or_else(|| Error::Format {
            what: "removal csv",
            detail: format!("{}: line {} is not `row,col`: {fields:?}", path.display(), k + 1),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionReport {
    pub iterations: usize,
    pub converged: bool,
    pub final_relative_change: f64,
}

/// Erases `removals` from `m` and fills them back in by Soft-Impute.
pub fn complete(m: &Matrix, removals: &[(usize, usize)], cfg: &SoftImputeConfig) -> Result<(Matrix, CompletionReport)> {
    let out = reconstruct(m, removals, cfg)?;
    let report = CompletionReport {
        iterations: out.iterations,
        converged: out.converged,
        final_relative_change: out.final_relative_change,
    };
    Ok((out.matrix, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub final_return: f64,
    pub final_arank_mean: f64,
    /// Riccati-optimal return on the same evaluation start states (LQR only).
    pub optimal_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub env: String,
    pub variant: Variant,
    pub total_steps: u64,
    pub seeds: Vec<SeedReport>,
    pub final_return_mean: f64,
    pub final_return_std: f64,
}

impl ExperimentReport {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

pub fn checkpoint_dir(seed_dir: &Path, step: u64) -> PathBuf {
    seed_dir.join("checkpoints").join(format!("step_{step}"))
}

/// Step of the midpoint checkpoint: half the run, rounded down to an
/// evaluation point.
pub fn midpoint_step(config: &ExperimentConfig) -> u64 {
    config.total_steps / 2 / config.eval_interval * config.eval_interval
}

/// Trains one agent per seed into `out` and writes the final report.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    config.save(&out.join("config.json"))?;
    let seeds = config
        .seeds
        .iter()
        .map(|&s| run_seed(config, s, &seed_dir(out, s)))
        .collect::<Result<Vec<_>>>()?;
    let n = seeds.len() as f64;
    let mean = seeds.iter().map(|s| s.final_return).sum::<f64>() / n;
    let var = seeds.iter().map(|s| (s.final_return - mean).powi(2)).sum::<f64>() / n;
    let report = ExperimentReport {
        env: config.env.name().to_string(),
        variant: config.agent.variant,
        total_steps: config.total_steps,
        seeds,
        final_return_mean: mean,
        final_return_std: var.sqrt(),
    };
    let path = out.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

struct Evaluator<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    metrics: csv::Writer<std::fs::File>,
    timing: csv::Writer<std::fs::File>,
    metrics_path: PathBuf,
    started: Instant,
    last: Option<MetricsRow>,
}

impl Evaluator<'_> {
    fn record(&mut self, step: u64, agent: &Agent, buffer: &ReplayBuffer) -> Result<()> {
        let cfg = self.config;
        let average_return = evaluate_policy(&cfg.env, cfg.eval_episodes, self.seed, |s| agent.policy_action(s))?;
        let scan = &cfg.rank_scan;
        let (arank_mean, arank_std) = if scan.num_matrices > 0 && buffer.len() >= scan.matrix_size {
            let mut scan_rng = rng::indexed_stream(self.seed, "rank_scan", step);
            let grids = sample_grids(buffer, scan.num_matrices, scan.matrix_size, &mut scan_rng)?;
            let r = rank_scan(&agent.critic, &grids, scan.delta, Execution::default())?;
            (r.mean, r.std)
        } else {
            (f64::NAN, f64::NAN)
        };
        let elapsed = self.started.elapsed().as_secs_f64();
        let row = MetricsRow {
            step,
            average_return,
            arank_mean,
            arank_std,
            wall_time: if cfg.record_wall_time { elapsed } else { 0.0 },
        };
        let path = self.metrics_path.clone();
        self.metrics.serialize(row).map_err(|e| csv_error(&path, e))?;
        self.metrics.flush().map_err(|e| Error::io(&path, e))?;
        self.timing
            .write_record([step.to_string(), elapsed.to_string(), agent.train_steps().to_string()])
            .map_err(|e| csv_error(&path, e))?;
        self.timing.flush().map_err(|e| Error::io(&path, e))?;
        self.last = Some(row);
        Ok(())
    }
}

fn save_checkpoint(dir: &Path, agent: &Agent, buffer: &ReplayBuffer) -> Result<()> {
    agent.save(dir)?;
    buffer.save(&dir.join(BUFFER_FILE))
}

/// One seed of `config`, written into `dir`.
pub fn run_seed(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedReport> {
    config.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    config.for_seed(seed).save(&dir.join("config.json"))?;

    let mut env = config.env.build()?;
    let spec = env.spec().clone();
    let mut agent = Agent::new(config.agent.clone(), spec.clone(), seed)?;
    let mut buffer = ReplayBuffer::new(config.agent.replay_capacity, spec.state_dim, spec.action_dim)?;
    let mut env_rng = rng::stream(seed, "env");
    let mut warmup_rng = rng::stream(seed, "warmup");

    let metrics_path = dir.join(METRICS_FILE);
    let timing_path = dir.join("timing.csv");
    let mut timing = csv::Writer::from_path(&timing_path).map_err(|e| csv_error(&timing_path, e))?;
    timing
        .write_record(["step", "wall_time", "train_steps"])
        .map_err(|e| csv_error(&timing_path, e))?;
    let mut eval = Evaluator {
        config,
        seed,
        metrics: csv::Writer::from_path(&metrics_path).map_err(|e| csv_error(&metrics_path, e))?,
        timing,
        metrics_path,
        started: Instant::now(),
        last: None,
    };
    eval.record(0, &agent, &buffer)?;

    let mid = midpoint_step(config);
    let mut state = env.reset(&mut env_rng);
    let mut pending = 0u64;
    for step in 1..=config.total_steps {
        let action = if step <= config.learning_starts {
            spec.action_low
                .iter()
                .zip(&spec.action_high)
                .map(|(l, h)| warmup_rng.random_range(*l..*h))
                .collect()
        } else {
            agent.explore_action(&state)?
        };
        let out = env.step(&action)?;
        buffer.push(Transition {
            state,
            action,
            reward: out.reward,
            next_state: out.next_state.clone(),
            terminal: out.terminal,
        })?;
        state = if out.terminal { env.reset(&mut env_rng) } else { out.next_state };
        if step > config.learning_starts {
            pending += 1;
        }
        if !config.episodic_updates || out.terminal {
            while pending > 0 {
                pending -= 1;
                if buffer.len() >= config.agent.batch_size {
                    agent.train_step(&buffer)?;
                }
            }
        }
        if step % config.eval_interval == 0 {
            eval.record(step, &agent, &buffer)?;
        }
        if step == mid && mid != config.total_steps {
            save_checkpoint(&checkpoint_dir(dir, step), &agent, &buffer)?;
        }
    }
    save_checkpoint(&checkpoint_dir(dir, config.total_steps), &agent, &buffer)?;

    let last = eval.last.expect("initial evaluation always runs");
    Ok(SeedReport {
        seed,
        final_return: last.average_return,
        final_arank_mean: last.arank_mean,
        optimal_return: optimal_return(&config.env, config.eval_episodes, seed)?,
    })
}

/// Final returns of several runs, laid out with one row per environment
/// and one column per variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnTable {
    pub envs: Vec<String>,
    pub variants: Vec<Variant>,
    /// `(env, variant) -> (mean, std, seeds)`.
    pub cells: BTreeMap<(String, Variant), (f64, f64, usize)>,
    /// Mean Riccati-optimal return per environment, where known.
    pub optimal: BTreeMap<String, f64>,
}

impl ReturnTable {
    pub fn from_reports(reports: &[ExperimentReport]) -> Result<Self> {
        let mut envs: Vec<String> = Vec::new();
        let mut cells = BTreeMap::new();
        let mut optimal = BTreeMap::new();
        for r in reports {
            if !envs.contains(&r.env) {
                envs.push(r.env.clone());
            }
            let key = (r.env.clone(), r.variant);
            if cells.contains_key(&key) {
                return Err(Error::InvalidArgument(format!("two runs of {} on {}", r.variant, r.env)));
            }
            cells.insert(key, (r.final_return_mean, r.final_return_std, r.seeds.len()));
            let opts: Vec<f64> = r.seeds.iter().filter_map(|s| s.optimal_return).collect();
            if !opts.is_empty() && opts.len() == r.seeds.len() {
                optimal.insert(r.env.clone(), opts.iter().sum::<f64>() / opts.len() as f64);
            }
        }
        let variants = Variant::ALL
            .into_iter()
            .filter(|v| reports.iter().any(|r| r.variant == *v))
            .collect();
        Ok(Self {
            envs,
            variants,
            cells,
            optimal,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Environment |");
        for v in &self.variants {
            let _ = write!(s, " {v} |");
        }
        if !self.optimal.is_empty() {
            s.push_str(" Optimal |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.variants.len() + usize::from(!self.optimal.is_empty())));
        s.push('\n');
        for env in &self.envs {
            let _ = write!(s, "| {env} |");
            for v in &self.variants {
                match self.cells.get(&(env.clone(), *v)) {
                    Some((m, sd, _)) => {
                        let _ = write!(s, " {m:.2} ± {sd:.2} |");
                    }
                    None => s.push_str(" - |"),
                }
            }
            if !self.optimal.is_empty() {
                match self.optimal.get(env) {
                    Some(o) => {
                        let _ = write!(s, " {o:.2} |");
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["env", "variant", "final_return_mean", "final_return_std", "seeds", "optimal_return"])
            .map_err(|e| csv_error(path, e))?;
        for ((env, v), (m, sd, n)) in &self.cells {
            let opt = self.optimal.get(env).map(|o| o.to_string()).unwrap_or_default();
            w.write_record([env.clone(), v.to_string(), m.to_string(), sd.to_string(), n.to_string(), opt])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Per-step mean of `average_return` and `arank_mean` over a run's seeds.
pub fn mean_curves(run_dir: &Path, report: &ExperimentReport) -> Result<Vec<(u64, f64, f64)>> {
    let per_seed = report
        .seeds
        .iter()
        .map(|s| read_metrics(&seed_dir(run_dir, s.seed).join(METRICS_FILE)))
        .collect::<Result<Vec<_>>>()?;
    let len = per_seed.iter().map(Vec::len).min().unwrap_or(0);
    let n = per_seed.len() as f64;
    Ok((0..len)
        .map(|k| {
            let ret = per_seed.iter().map(|m| m[k].average_return).sum::<f64>() / n;
            let rank = per_seed.iter().map(|m| m[k].arank_mean).sum::<f64>() / n;
            (per_seed[0][k].step, ret, rank)
        })
        .collect())
}

/// A minimal SVG line chart; non-finite points are skipped.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 56.0;
    const COLORS: [&str; 7] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"];
    let points = series.iter().flat_map(|(_, p)| p).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in points {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !(x0 <= x1) {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        W / 2.0,
        xml_escape(title),
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 12.0,
        xml_escape(x_label),
        H / 2.0,
        H / 2.0,
        xml_escape(y_label),
    );
    for (k, v) in [(x0, y0), (x1, y1)].iter().enumerate() {
        let anchor = if k == 0 { "start" } else { "end" };
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"{anchor}\">{}</text>",
            px(v.0),
            H - M + 16.0,
            v.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>",
            M - 4.0,
            py(v.1) + 4.0,
            v.1
        );
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        );
        let ly = M + 16.0 * k as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\" text-anchor=\"end\">{}</text>",
            W - M,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `return_<env>.svg` and `arank_<env>.svg` into `out`, one line per
/// run. Returns the files written.
pub fn write_charts(runs: &[(PathBuf, ExperimentReport)], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut by_env: BTreeMap<String, Vec<(String, Vec<(u64, f64, f64)>)>> = BTreeMap::new();
    for (dir, report) in runs {
        by_env
            .entry(report.env.clone())
            .or_default()
            .push((report.variant.to_string(), mean_curves(dir, report)?));
    }
    let mut written = Vec::new();
    for (env, curves) in by_env {
        for (file, label, pick) in [
            ("return", "average return", 1usize),
            ("arank", "approximate rank", 2usize),
        ] {
            let series: Vec<(String, Vec<(f64, f64)>)> = curves
                .iter()
                .map(|(name, c)| {
                    let pts = c
                        .iter()
                        .map(|&(step, r, a)| (step as f64, if pick == 1 { r } else { a }))
                        .collect();
                    (name.clone(), pts)
                })
                .collect();
            let path = out.join(format!("{file}_{env}.svg"));
            let svg = line_chart_svg(&format!("{env}: {label}"), "step", label, &series);
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::TabularQ;
    use crate::envs::{value_iteration, FiniteMdp, LqrConfig};
    use crate::linalg::approximate_rank;
    use crate::nn::{Mlp, OutputActivation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            agent: AgentConfig {
                batch_size: 8,
                hidden_sizes: vec![8],
                replay_capacity: 1_000,
                ..AgentConfig::default()
            },
            total_steps: 200,
            eval_interval: 100,
            eval_episodes: 2,
            learning_starts: 50,
            rank_scan: RankScanConfig {
                num_matrices: 3,
                matrix_size: 8,
                delta: 0.01,
            },
            seeds: vec![3],
            ..ExperimentConfig::default()
        }
    }

    fn filled_buffer(n: usize) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(n, 1, 1).unwrap();
        for k in 0..n {
            let x = k as f64 / n as f64 - 0.5;
            b.push(Transition {
                state: vec![x],
                action: vec![-x],
                reward: 0.0,
                next_state: vec![x],
                terminal: false,
            })
            .unwrap();
        }
        b
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[0.1, 0.5, 0.7, 9.0]).unwrap(), Some(1.0));
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        assert_eq!(spearman(&x, &[2.0; 4]).unwrap(), None);
        // d = [0, 0, 1, -1]: 1 - 6*2/(4*15) = 0.8.
        let rho = spearman(&x, &[1.0, 2.0, 4.0, 3.0]).unwrap().unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
        assert!(spearman(&x, &[1.0]).is_err());
    }

    #[test]
    fn constant_critic_has_rank_one() {
        let mut net = Mlp::new(&[2, 4, 1], OutputActivation::Identity, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut p = net.params().to_vec();
        p.iter_mut().for_each(|x| *x = 0.0);
        *p.last_mut().unwrap() = 2.5;
        net = Mlp::from_params(&[2, 4, 1], OutputActivation::Identity, p).unwrap();
        let buffer = filled_buffer(40);
        let grids = sample_grids(&buffer, 5, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let scan = rank_scan(&net, &grids, 0.01, Execution::default()).unwrap();
        assert_eq!(scan.mean, 1.0);
        assert_eq!(scan.std, 0.0);
        assert_eq!(scan.histogram(), vec![(1, 5)]);
    }

    #[test]
    fn single_matrix_scan_has_zero_std() {
        let lqr = crate::envs::Lqr::new(&LqrConfig::default()).unwrap();
        let buffer = filled_buffer(64);
        let grids = sample_grids(&buffer, 1, 32, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let scan = rank_scan(&lqr, &grids, 0.01, Execution::default()).unwrap();
        assert_eq!(scan.std, 0.0);
        assert!(scan.mean <= 3.0);
    }

    #[test]
    fn grids_use_distinct_rows_and_columns() {
        let buffer = filled_buffer(20);
        let grids = sample_grids(&buffer, 4, 20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for g in &grids {
            let mut s: Vec<f64> = (0..20).map(|i| g.state(i)[0]).collect();
            s.sort_by(f64::total_cmp);
            s.dedup();
            assert_eq!(s.len(), 20);
        }
        assert!(sample_grids(&buffer, 1, 21, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn tabular_scan_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mdp = FiniteMdp::random(12, 9, 0.9, &mut rng).unwrap();
        let table = value_iteration(&mdp);
        let mut b = ReplayBuffer::new(200, 1, 1).unwrap();
        for _ in 0..200 {
            let s = rng.random_range(0..12) as f64;
            let a = rng.random_range(0..9) as f64;
            b.push(Transition {
                state: vec![s],
                action: vec![a],
                reward: 0.0,
                next_state: vec![s],
                terminal: false,
            })
            .unwrap();
        }
        let grids = sample_grids(&b, 10, 6, &mut rng).unwrap();
        let scan = rank_scan(&TabularQ(table.clone()), &grids, 0.05, Execution::default()).unwrap();
        for (g, r) in grids.iter().zip(&scan.aranks) {
            let sub = Matrix::from_fn(6, 6, |i, j| table.get(g.state(i)[0] as usize, g.action(j)[0] as usize)).unwrap();
            assert_eq!(*r, approximate_rank(&sub, 0.05).unwrap());
        }
    }

    #[test]
    fn identical_ensemble_is_undefined_correlation() {
        let net = Mlp::new(&[2, 6, 1], OutputActivation::Identity, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let members = vec![net.clone(), net.clone(), net.clone()];
        let buffer = filled_buffer(50);
        let grids = sample_grids(&buffer, 6, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let rep = correlate(&net, &Quantifier::Ensemble(&members), &grids, 0.01, Execution::default()).unwrap();
        assert!(rep.rows.iter().all(|r| r.u_mean == 0.0));
        assert_eq!(rep.spearman, None);
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let mut c = ExperimentConfig {
            eval_interval: 7,
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
        c.eval_interval = 1_000;
        c.agent.gamma = 0.9;
        assert!(c.validate().is_err());
        c.agent.gamma = 0.99;
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
        c.seeds = vec![];
        assert!(c.validate().is_err());
        let json = r#"{"total_steps": 10, "eval_interval": 5, "bogus": 1}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
    }

    #[test]
    fn optimal_return_uses_riccati_policy() {
        let env = EnvConfig::Lqr(LqrConfig::default());
        let opt = optimal_return(&env, 3, 0).unwrap().unwrap();
        let zero = evaluate_policy(&env, 3, 0, |_| Ok(vec![0.0])).unwrap();
        assert!(opt < 0.0 && opt > zero);
        let pend = EnvConfig::Pendulum(Default::default());
        assert_eq!(optimal_return(&pend, 1, 0).unwrap(), None);
    }

    #[test]
    fn zero_step_run_has_only_initial_row() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            total_steps: 0,
            ..tiny_config()
        };
        let report = run_experiment(&cfg, dir.path()).unwrap();
        let rows = read_metrics(&seed_dir(dir.path(), 3).join(METRICS_FILE)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].step, 0);
        assert!(rows[0].arank_mean.is_nan());
        assert_eq!(report.seeds[0].final_return, rows[0].average_return);
        assert!(checkpoint_dir(&seed_dir(dir.path(), 3), 0).join("agent.json").exists());
    }

    #[test]
    fn run_layout_and_repeatability() {
        let cfg = tiny_config();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_experiment(&cfg, a.path()).unwrap();
        run_experiment(&cfg, b.path()).unwrap();
        let seed = seed_dir(a.path(), 3);
        let text = std::fs::read_to_string(seed.join(METRICS_FILE)).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,average_return,arank_mean,arank_std,wall_time");
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text, std::fs::read_to_string(seed_dir(b.path(), 3).join(METRICS_FILE)).unwrap());
        for step in [100, 200] {
            let ck = checkpoint_dir(&seed, step);
            assert!(ck.join("agent.json").exists() && ck.join(BUFFER_FILE).exists());
        }
        let echoed = ExperimentConfig::load(&seed.join("config.json")).unwrap();
        assert_eq!(echoed, cfg.for_seed(3));
        let report = ExperimentReport::load(a.path()).unwrap();
        assert_eq!(report.variant, Variant::Ddpg);
        assert!(report.seeds[0].optimal_return.is_some());
    }

    #[test]
    fn episodic_updates_defer_training_to_episode_end() {
        let cfg = ExperimentConfig {
            env: EnvConfig::Lqr(LqrConfig {
                horizon: 40,
                ..LqrConfig::default()
            }),
            total_steps: 100,
            eval_interval: 50,
            learning_starts: 10,
            episodic_updates: true,
            ..tiny_config()
        };
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&cfg, dir.path()).unwrap();
        let seed = seed_dir(dir.path(), 3);
        let timing = std::fs::read_to_string(seed.join("timing.csv")).unwrap();
        let trained: Vec<&str> = timing.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
        // Episodes end at steps 40 and 80: 30 updates by step 50, 70 by 100.
        assert_eq!(trained, vec!["0", "30", "70"]);
        let agent = Agent::load(&checkpoint_dir(&seed, 100)).unwrap();
        assert_eq!(agent.train_steps(), 70);

        let per_step = ExperimentConfig {
            episodic_updates: false,
            ..cfg
        };
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&per_step, dir.path()).unwrap();
        let agent = Agent::load(&checkpoint_dir(&seed_dir(dir.path(), 3), 100)).unwrap();
        assert_eq!(agent.train_steps(), 90);
    }

    #[test]
    fn removal_csv_forms() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "").unwrap();
        assert!(read_removals_csv(&p).unwrap().is_empty());
        std::fs::write(&p, "row,col\n0,1\n2, 3\n").unwrap();
        assert_eq!(read_removals_csv(&p).unwrap(), vec![(0, 1), (2, 3)]);
        std::fs::write(&p, "0,1,2\n").unwrap();
        assert!(read_removals_csv(&p).is_err());
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = Matrix::from_rows(&[[1.0, -2.5, 1e-17], [0.1, 3.0, f64::MAX]]).unwrap();
        write_matrix_csv(&p, &m).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), m);
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(read_matrix_csv(&p).is_err());
    }

    #[test]
    fn table_layout() {
        let rep = |env: &str, v, m| ExperimentReport {
            env: env.into(),
            variant: v,
            total_steps: 10,
            seeds: vec![SeedReport {
                seed: 0,
                final_return: m,
                final_arank_mean: 1.0,
                optimal_return: (env == "lqr").then_some(-1.0),
            }],
            final_return_mean: m,
            final_return_std: 0.0,
        };
        let t = ReturnTable::from_reports(&[
            rep("lqr", Variant::UalqeTBb, -2.0),
            rep("lqr", Variant::Ddpg, -3.0),
            rep("pendulum", Variant::Ddpg, -150.0),
        ])
        .unwrap();
        assert_eq!(t.variants, vec![Variant::Ddpg, Variant::UalqeTBb]);
        let md = t.to_markdown();
        assert!(md.starts_with("| Environment | DDPG | UALQE-T-BB | Optimal |"));
        assert!(md.contains("| pendulum | -150.00 ± 0.00 | - | - |"));
        assert!(ReturnTable::from_reports(&[rep("lqr", Variant::Ddpg, 0.0), rep("lqr", Variant::Ddpg, 1.0)]).is_err());
    }

    #[test]
    fn chart_contains_each_series() {
        let svg = line_chart_svg(
            "t<1>",
            "x",
            "y",
            &[
                ("a".into(), vec![(0.0, 1.0), (1.0, 2.0)]),
                ("b".into(), vec![(0.0, f64::NAN), (1.0, 0.0)]),
            ],
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("t&lt;1&gt;"));
    }
}
