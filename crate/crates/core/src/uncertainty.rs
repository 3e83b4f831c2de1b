//! Value-estimate uncertainty and the choice of Q-matrix entries to erase.
//!
//! Two quantifiers score a grid of `(state_i, action_j)` pairs:
//!
//! * count-based: `1 / N(s, a)` where visits are counted per 64-bit SimHash
//!   code of the normalised pair (unseen pairs score 1);
//! * ensemble-based: population standard deviation of K critic estimates.
//!
//! [`select_top_p_per_row`] then erases the most uncertain `⌈p·cols/100⌉`
//! entries of every row.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Execution};
use crate::linalg::Matrix;
use crate::nn::Mlp;
use crate::{rng, Error, Result};

/// 64-bit SimHash of a state-action pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HashCode(pub u64);

/// `rows x cols` grid of state-action pairs: row `i` carries state `i`,
/// column `j` carries action `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrid {
    pub state_dim: usize,
    pub action_dim: usize,
    /// `rows x state_dim`, row-major.
    pub states: Vec<f64>,
    /// `cols x action_dim`, row-major.
    pub actions: Vec<f64>,
}

impl PairGrid {
    pub fn new(state_dim: usize, action_dim: usize, states: Vec<f64>, actions: Vec<f64>) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::Empty("pair dimensions"));
        }
        if states.is_empty() || states.len() % state_dim != 0 {
            return Err(Error::dims("grid states", format!("multiple of {state_dim}"), states.len()));
        }
        if actions.is_empty() || actions.len() % action_dim != 0 {
            return Err(Error::dims("grid actions", format!("multiple of {action_dim}"), actions.len()));
        }
        Ok(Self {
            state_dim,
            action_dim,
            states,
            actions,
        })
    }

    pub fn rows(&self) -> usize {
        self.states.len() / self.state_dim
    }

    pub fn cols(&self) -> usize {
        self.actions.len() / self.action_dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, j: usize) -> &[f64] {
        &self.actions[j * self.action_dim..(j + 1) * self.action_dim]
    }

    /// Concatenated `(state_i, action_j)` inputs in row-major grid order.
    pub fn pair_inputs(&self) -> Vec<f64> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(r * c * (self.state_dim + self.action_dim));
        for i in 0..r {
            for j in 0..c {
                out.extend_from_slice(self.state(i));
                out.extend_from_slice(self.action(j));
            }
        }
        out
    }
}

/// Visit counts keyed by SimHash code.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    state_dim: usize,
    action_dim: usize,
    seed: u64,
    /// Per concatenated dimension, the range mapped onto `[-1, 1]`.
    bounds: Vec<(f64, f64)>,
    hyperplanes: Vec<f64>,
    counts: BTreeMap<u64, u64>,
}

#[derive(Serialize, Deserialize)]
struct CountTableFile {
    state_dim: usize,
    action_dim: usize,
    projection_seed: u64,
    bounds: Vec<(f64, f64)>,
    /// Hex code -> visit count.
    counts: BTreeMap<String, u64>,
}

impl CountTable {
    pub const BITS: usize = 64;

    /// Table over un-normalised inputs (every bound `[-1, 1]`).
    pub fn new(state_dim: usize, action_dim: usize, seed: u64) -> Self {
        Self::with_bounds(state_dim, action_dim, seed, vec![(-1.0, 1.0); state_dim + action_dim])
            .expect("default bounds are valid")
    }

    pub fn with_bounds(state_dim: usize, action_dim: usize, seed: u64, bounds: Vec<(f64, f64)>) -> Result<Self> {
        let dim = state_dim + action_dim;
        if bounds.len() != dim {
            return Err(Error::dims("hash bounds", dim, bounds.len()));
        }
        if bounds.iter().any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::InvalidArgument("hash bounds need finite low < high".into()));
        }
        let mut r = rng::stream(seed, "simhash");
        let hyperplanes = (0..Self::BITS * dim).map(|_| r.sample(StandardNormal)).collect();
        Ok(Self {
            state_dim,
            action_dim,
            seed,
            bounds,
            hyperplanes,
            counts: BTreeMap::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of distinct codes seen.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total_visits(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Bit `b` is set iff the normalised pair has a non-negative projection
    /// on hyperplane `b`.
    pub fn hash(&self, state: &[f64], action: &[f64]) -> Result<HashCode> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(Error::dims(
                "hashed pair",
                format!("{}+{}", self.state_dim, self.action_dim),
                format!("{}+{}", state.len(), action.len()),
            ));
        }
        let dim = self.state_dim + self.action_dim;
        let mut z = [0.0f64; 32];
        let mut heap;
        let z: &mut [f64] = if dim <= 32 {
            &mut z[..dim]
        } else {
            heap = vec![0.0; dim];
            &mut heap
        };
        for (k, x) in state.iter().chain(action).enumerate() {
            let (lo, hi) = self.bounds[k];
            z[k] = (2.0 * x - (lo + hi)) / (hi - lo);
        }
        let mut code = 0u64;
        for b in 0..Self::BITS {
            let plane = &self.hyperplanes[b * dim..(b + 1) * dim];
            let p: f64 = plane.iter().zip(z.iter()).map(|(w, v)| w * v).sum();
            if p >= 0.0 {
                code |= 1u64 << b;
            }
        }
        Ok(HashCode(code))
    }

    pub fn record_visit(&mut self, state: &[f64], action: &[f64]) -> Result<HashCode> {
        let code = self.hash(state, action)?;
        *self.counts.entry(code.0).or_insert(0) += 1;
        Ok(code)
    }

    pub fn count_of(&self, code: HashCode) -> u64 {
        self.counts.get(&code.0).copied().unwrap_or(0)
    }

    pub fn count(&self, state: &[f64], action: &[f64]) -> Result<u64> {
        Ok(self.count_of(self.hash(state, action)?))
    }

    pub fn u_cb(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(u_cb(self.count(state, action)?))
    }

    pub fn score_grid(&self, grid: &PairGrid) -> Result<UncertaintyMatrix> {
        let (r, c) = (grid.rows(), grid.cols());
        let mut values = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                values.push(self.u_cb(grid.state(i), grid.action(j))?);
            }
        }
        UncertaintyMatrix::new(r, c, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CountTableFile {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            projection_seed: self.seed,
            bounds: self.bounds.clone(),
            counts: self.counts.iter().map(|(k, v)| (format!("{k:016x}"), *v)).collect(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CountTableFile = serde_json::from_str(&text)?;
        let mut table = Self::with_bounds(file.state_dim, file.action_dim, file.projection_seed, file.bounds)?;
        for (k, v) in file.counts {
            let code = u64::from_str_radix(&k, 16).map_err(|e| Error::Format {
                what: "count table",
                detail: format!("bad code {k}: {e}"),
            })?;
            table.counts.insert(code, v);
        }
        Ok(table)
    }
}

/// `1 / n`, and 1 for an unseen pair.
pub fn u_cb(visits: u64) -> f64 {
    if visits == 0 {
        1.0
    } else {
        1.0 / visits as f64
    }
}

/// Population standard deviation (divisor K) of K ≥ 2 estimates.
pub fn u_bb(estimates: &[f64]) -> Result<f64> {
    if estimates.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ensemble uncertainty needs at least 2 estimates, got {}",
            estimates.len()
        )));
    }
    if estimates.iter().all(|e| *e == estimates[0]) {
        return Ok(0.0);
    }
    let k = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / k;
    let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / k;
    Ok(var.sqrt())
}

/// Ensemble-based uncertainty of every grid entry. Members are evaluated
/// independently (possibly in parallel).
pub fn ensemble_score_grid(members: &[Mlp], grid: &PairGrid, exec: Execution) -> Result<UncertaintyMatrix> {
    if members.len() < 2 {
        return Err(Error::InvalidArgument("ensemble needs at least 2 members".into()));
    }
    let inputs = grid.pair_inputs();
    let n = grid.rows() * grid.cols();
    let outputs: Vec<Result<Vec<f64>>> = exec::map_indexed(members.len(), exec, |k| members[k].forward_batch(&inputs, n));
    let outputs: Vec<Vec<f64>> = outputs.into_iter().collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(n);
    let mut buf = vec![0.0; members.len()];
    for e in 0..n {
        for (k, o) in outputs.iter().enumerate() {
            buf[k] = o[e];
        }
        values.push(u_bb(&buf)?);
    }
    UncertaintyMatrix::new(grid.rows(), grid.cols(), values)
}

/// A source of per-pair uncertainty.
#[derive(Debug, Clone, Copy)]
pub enum Quantifier<'a> {
    Counts(&'a CountTable),
    Ensemble(&'a [Mlp]),
}

impl Quantifier<'_> {
    pub fn score(&self, grid: &PairGrid, exec: Execution) -> Result<UncertaintyMatrix> {
        match self {
            Quantifier::Counts(t) => t.score_grid(grid),
            Quantifier::Ensemble(m) => ensemble_score_grid(m, grid, exec),
        }
    }
}

/// Non-negative uncertainty per Q-matrix entry.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl UncertaintyMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::dims("uncertainty matrix", rows * cols, values.len()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("uncertainties must be finite and non-negative".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population standard deviation of all entries.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len() as f64).sqrt()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_parts(self.rows, self.cols, self.values.clone())
    }
}

/// Entries of a `rows x cols` Q-matrix selected for erasure, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemovalSet {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize)>,
}

impl RemovalSet {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.entries.binary_search(&(r, c)).is_ok()
    }

    pub fn per_row_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.rows];
        for (r, _) in &self.entries {
            out[*r] += 1;
        }
        out
    }

    pub fn per_column_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.cols];
        for (_, c) in &self.entries {
            out[*c] += 1;
        }
        out
    }
}

/// `⌈p · cols / 100⌉`, validated against `0 ≤ p < 100` and leaving at
/// least one entry per row.
pub fn per_row_count(p: f64, cols: usize) -> Result<usize> {
    if !(0.0..100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("removal percentage must lie in [0, 100), got {p}")));
    }
    let exact = p * cols as f64 / 100.0;
    let k = (exact - 1e-9).ceil().max(0.0) as usize;
    if k > 0 && k >= cols {
        return Err(Error::InvalidArgument(format!(
            "removing {k} of {cols} entries per row would empty the row"
        )));
    }
    Ok(k)
}

/// Re-admits one removal in every column that lost all its entries.
/// `victim(col, rows_removed)` picks the row to rescind.
fn guard_columns(rows: usize, cols: usize, picked: &mut [Vec<usize>], victim: impl Fn(usize) -> usize) {
    for c in 0..cols {
        if rows > 0 && picked.iter().all(|row| row.contains(&c)) {
            let r = victim(c);
            picked[r].retain(|x| *x != c);
        }
    }
}

fn collect(rows: usize, cols: usize, picked: Vec<Vec<usize>>) -> RemovalSet {
    let mut entries: Vec<(usize, usize)> = picked
        .into_iter()
        .enumerate()
        .flat_map(|(r, cs)| cs.into_iter().map(move |c| (r, c)))
        .collect();
    entries.sort_unstable();
    RemovalSet { rows, cols, entries }
}

/// Per row, the `⌈p · cols / 100⌉` most uncertain columns (ties go to the
/// smaller column index). A column that every row would erase keeps its
/// entry in the row where it is least uncertain.
pub fn select_top_p_per_row(u: &UncertaintyMatrix, p: f64) -> Result<RemovalSet> {
    let k = per_row_count(p, u.cols)?;
    if k == 0 {
        return Ok(RemovalSet::empty(u.rows, u.cols));
    }
    let mut picked: Vec<Vec<usize>> = (0..u.rows)
        .map(|i| {
            let row = u.row(i);
            let mut idx: Vec<usize> = (0..u.cols).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect();
    guard_columns(u.rows, u.cols, &mut picked, |c| {
        (0..u.rows)
            .min_by(|&a, &b| u.get(a, c).total_cmp(&u.get(b, c)).then(a.cmp(&b)))
            .expect("at least one row")
    });
    Ok(collect(u.rows, u.cols, picked))
}

/// Per row, `⌈p · cols / 100⌉` columns drawn uniformly without replacement.
/// A column that every row would erase keeps its entry in row 0.
pub fn select_random_per_row(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Result<RemovalSet> {
    let k = per_row_count(p, cols)?;
    if k == 0 {
        return Ok(RemovalSet::empty(rows, cols));
    }
    let mut picked: Vec<Vec<usize>> = (0..rows)
        .map(|_| {
            let mut v = sample(rng, cols, k).into_vec();
            v.sort_unstable();
            v
        })
        .collect();
    guard_columns(rows, cols, &mut picked, |_| 0);
    Ok(collect(rows, cols, picked))
}
