//! Matrix completion by Soft-Impute.
//!
//! Observed entries are held fixed at their data values while the missing
//! entries are iterated: each step fills the gaps with the current estimate,
//! takes an SVD of the combined matrix and soft-thresholds its singular
//! values by `λ = σ_max / ζ` (clamped at zero).

use serde::{Deserialize, Serialize};

use crate::linalg::{symmetric_eigen, Matrix};
use crate::{Error, Result};

/// The set Ω of observed entries of a `rows x cols` matrix.
///
/// Every row and every column keeps at least one observed entry; a mask
/// that would leave one empty is rejected at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask {
    rows: usize,
    cols: usize,
    observed: Vec<bool>,
}

impl ObservationMask {
    pub fn new(rows: usize, cols: usize, observed: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut flags = vec![false; rows * cols];
        for (r, c) in observed {
            if r >= rows || c >= cols {
                return Err(Error::InvalidArgument(format!(
                    "observed index ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            flags[r * cols + c] = true;
        }
        Self::from_flags(rows, cols, flags)
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            observed: vec![true; rows * cols],
        }
    }

    /// Ω as the complement of `removed`.
    pub fn complement_of(rows: usize, cols: usize, removed: &[(usize, usize)]) -> Result<Self> {
        let mut flags = vec![true; rows * cols];
        for &(r, c) in removed {
            if r >= rows || c >= cols {
                return Err(Error::InvalidArgument(format!(
                    "removed index ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            flags[r * cols + c] = false;
        }
        Self::from_flags(rows, cols, flags)
    }

    fn from_flags(rows: usize, cols: usize, observed: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("mask shape"));
        }
        for r in 0..rows {
            if !observed[r * cols..(r + 1) * cols].iter().any(|x| *x) {
                return Err(Error::InfeasibleMask(format!("row {r} has no observed entry")));
            }
        }
        for c in 0..cols {
            if !(0..rows).any(|r| observed[r * cols + c]) {
                return Err(Error::InfeasibleMask(format!("column {c} has no observed entry")));
            }
        }
        Ok(Self { rows, cols, observed })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_observed(&self, r: usize, c: usize) -> bool {
        self.observed[r * self.cols + c]
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|x| **x).count()
    }

    pub fn missing(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.cols;
        self.observed
            .iter()
            .enumerate()
            .filter(|(_, o)| !**o)
            .map(move |(k, _)| (k / cols, k % cols))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftImputeConfig {
    /// Singular filtering divider ζ: each iteration subtracts `σ_max / ζ`.
    pub zeta: f64,
    /// Stop once `‖X_{t+1} - X_t‖_F / ‖X_t‖_F <= epsilon`.
    pub epsilon: f64,
    pub max_iterations: usize,
}

impl Default for SoftImputeConfig {
    fn default() -> Self {
        Self {
            zeta: 50.0,
            epsilon: 1e-4,
            max_iterations: 100,
        }
    }
}

impl SoftImputeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta > 1.0) || !self.zeta.is_finite() {
            return Err(Error::InvalidConfig(format!("zeta must be > 1, got {}", self.zeta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SoftImputeOutcome {
    pub matrix: Matrix,
    pub iterations: usize,
    /// False when `max_iterations` ran out before the change fell to epsilon.
    pub converged: bool,
    pub final_relative_change: f64,
    /// Relative Frobenius change of every iteration, in order.
    pub relative_changes: Vec<f64>,
}

fn check_shape(m: &Matrix, mask: &ObservationMask) -> Result<()> {
    if m.shape() != mask.shape() {
        return Err(Error::dims(
            "observation mask",
            format!("{:?}", m.shape()),
            format!("{:?}", mask.shape()),
        ));
    }
    Ok(())
}

/// `P_Ω(m)` when `keep_observed`, otherwise `P_Ω̄(m)`: the kept entries are
/// copied, every other entry is zero.
pub fn project(m: &Matrix, mask: &ObservationMask, keep_observed: bool) -> Result<Matrix> {
    check_shape(m, mask)?;
    let data = m
        .as_slice()
        .iter()
        .zip(&mask.observed)
        .map(|(x, o)| if *o == keep_observed { *x } else { 0.0 })
        .collect();
    Ok(Matrix::from_parts(m.rows(), m.cols(), data))
}

fn relative_change(new: &Matrix, old: &Matrix) -> f64 {
    let mut diff = 0.0;
    let mut base = 0.0;
    for (a, b) in new.as_slice().iter().zip(old.as_slice()) {
        diff += (a - b) * (a - b);
        base += b * b;
    }
    if base > 0.0 {
        (diff / base).sqrt()
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// `Σ_k max(σ_k − λ, 0) u_k v_kᵀ` with `λ = σ_max / zeta`.
///
/// Only singular triplets above `λ` survive, so they are read off the
/// eigendecomposition of the Gram matrix of the narrow side: with `a` tall,
/// the result is `a · Σ_{σ_k > λ} (1 − λ/σ_k) v_k v_kᵀ`.
fn shrink_singular_values(m: &Matrix, zeta: f64) -> Result<Matrix> {
    let transposed = m.rows() < m.cols();
    let a = if transposed { m.transpose() } else { m.clone() };
    let n = a.cols();
    let at = a.transpose();
    let mut gram = at.matmul(&a)?;
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (gram.get(i, j) + gram.get(j, i));
            gram.set(i, j, avg);
            gram.set(j, i, avg);
        }
    }
    let eig = symmetric_eigen(&gram)?;
    let sigma_max = eig.values[0].max(0.0).sqrt();
    let lambda = sigma_max / zeta;
    let factors: Vec<f64> = eig
        .values
        .iter()
        .map(|ev| ev.max(0.0).sqrt())
        .take_while(|&sigma| sigma > lambda)
        .map(|sigma| 1.0 - lambda / sigma)
        .collect();
    let r = factors.len();
    if r == 0 {
        return Ok(Matrix::zeros(m.rows(), m.cols()));
    }
    let kept = Matrix::from_fn(n, r, |i, k| eig.vectors.get(i, k))?;
    let scaled_t = Matrix::from_fn(r, n, |k, j| factors[k] * eig.vectors.get(j, k))?;
    let out = a.matmul(&kept)?.matmul(&scaled_t)?;
    Ok(if transposed { out.transpose() } else { out })
}

/// Completes `m` from its entries on `mask`; values of `m` off the mask are
/// ignored. Returns the final shrunk iterate, which also differs from the
/// data on observed entries (see [`reconstruct`] for the spliced form).
pub fn soft_impute(m: &Matrix, mask: &ObservationMask, cfg: &SoftImputeConfig) -> Result<SoftImputeOutcome> {
    cfg.validate()?;
    let observed = project(m, mask, true)?;
    let (rows, cols) = m.shape();
    let mut current = observed.clone();
    let mut changes = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.max_iterations {
        let combined: Vec<f64> = observed
            .as_slice()
            .iter()
            .zip(current.as_slice())
            .zip(&mask.observed)
            .map(|((o, x), is_obs)| if *is_obs { *o } else { *x })
            .collect();
        let combined = Matrix::from_parts(rows, cols, combined);
        let next = shrink_singular_values(&combined, cfg.zeta)?;
        let change = relative_change(&next, &current);
        changes.push(change);
        current = next;
        if change <= cfg.epsilon {
            converged = true;
            break;
        }
    }

    Ok(SoftImputeOutcome {
        iterations: changes.len(),
        final_relative_change: *changes.last().unwrap_or(&0.0),
        relative_changes: changes,
        converged,
        matrix: current,
    })
}

/// Erases `removed` from `q`, completes the matrix and splices the
/// completed values back in. Every entry not in `removed` is returned
/// bit-identical to `q`. An empty removal set returns `q` untouched without
/// running the solver.
pub fn reconstruct(q: &Matrix, removed: &[(usize, usize)], cfg: &SoftImputeConfig) -> Result<SoftImputeOutcome> {
    if removed.is_empty() {
        cfg.validate()?;
        return Ok(SoftImputeOutcome {
            matrix: q.clone(),
            iterations: 0,
            converged: true,
            final_relative_change: 0.0,
            relative_changes: Vec::new(),
        });
    }
    let mask = ObservationMask::complement_of(q.rows(), q.cols(), removed)?;
    let mut outcome = soft_impute(q, &mask, cfg)?;
    let mut spliced = q.clone();
    for &(r, c) in removed {
        spliced.set(r, c, outcome.matrix.get(r, c));
    }
    outcome.matrix = spliced;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::nuclear_norm;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent rank-1 completion: with `m = u vᵀ`, any missing `(i, j)`
    /// equals `m[i][k] * m[l][j] / m[l][k]` for an observed row `i`-column
    /// `k`, row `l`-column `j`, row `l`-column `k` triple.
    fn rank_one_oracle(m: &Matrix, mask: &ObservationMask, i: usize, j: usize) -> f64 {
        let (rows, cols) = m.shape();
        for k in 0..cols {
            for l in 0..rows {
                if mask.is_observed(i, k) && mask.is_observed(l, j) && mask.is_observed(l, k) && m.get(l, k) != 0.0 {
                    return m.get(i, k) * m.get(l, j) / m.get(l, k);
                }
            }
        }
        panic!("no ratio path for ({i}, {j})");
    }

    fn rank_one_fixture() -> Matrix {
        Matrix::outer(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.5, 2.0, 1.0]).unwrap()
    }

    #[test]
    fn shrink_matches_svd_thresholding() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (r, c, zeta) in [(64, 64, 50.0), (30, 12, 5.0), (7, 20, 2.0), (3, 3, 1.0)] {
            let m = Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)).unwrap();
            let d = crate::linalg::svd(&m).unwrap();
            let lambda = d.singular_values[0] / zeta;
            let shrunk: Vec<f64> = d.singular_values.iter().map(|s| (s - lambda).max(0.0)).collect();
            let want = d.compose_with(&shrunk);
            let got = shrink_singular_values(&m, zeta).unwrap();
            assert!(got.sub(&want).unwrap().frobenius_norm() < 1e-10 * m.frobenius_norm(), "{r}x{c}");
        }
        assert!(shrink_singular_values(&Matrix::zeros(4, 5), 50.0).unwrap().is_zero());
    }

    #[test]
    fn project_examples() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let full = ObservationMask::full(2, 2);
        assert_eq!(project(&m, &full, true).unwrap(), m);
        assert!(project(&m, &full, false).unwrap().is_zero());
        let diag = ObservationMask::new(2, 2, [(0, 0), (1, 1)]).unwrap();
        let kept = project(&m, &diag, true).unwrap();
        assert_eq!(kept, Matrix::from_rows(&[[1.0, 0.0], [0.0, 4.0]]).unwrap());
        let dropped = project(&m, &diag, false).unwrap();
        assert_eq!(dropped, Matrix::from_rows(&[[0.0, 2.0], [3.0, 0.0]]).unwrap());
        let wrong = ObservationMask::full(3, 2);
        assert!(project(&m, &wrong, true).is_err());
    }

    #[test]
    fn infeasible_masks_rejected() {
        assert!(matches!(
            ObservationMask::complement_of(2, 2, &[(0, 0), (0, 1)]),
            Err(Error::InfeasibleMask(_))
        ));
        assert!(matches!(
            ObservationMask::new(2, 2, [(0, 0), (1, 0)]),
            Err(Error::InfeasibleMask(_))
        ));
        assert!(ObservationMask::new(2, 2, [(2, 0)]).is_err());
    }

    #[test]
    fn fully_observed_with_tiny_shrinkage_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Matrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let cfg = SoftImputeConfig {
            zeta: 1e9,
            ..Default::default()
        };
        let out = soft_impute(&m, &ObservationMask::full(4, 4), &cfg).unwrap();
        assert!(out.matrix.sub(&m).unwrap().frobenius_norm() / m.frobenius_norm() < 1e-6);
    }

    #[test]
    fn zero_observations_give_zero_after_one_iteration() {
        let m = Matrix::zeros(3, 3);
        let mask = ObservationMask::complement_of(3, 3, &[(0, 1), (2, 2)]).unwrap();
        let out = soft_impute(&m, &mask, &SoftImputeConfig::default()).unwrap();
        assert!(out.matrix.is_zero());
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
    }

    #[test]
    fn rank_one_recovers_hidden_entries() {
        let m = rank_one_fixture();
        // One hidden entry per row and column. The fixed point of the
        // ζ = 50 iteration is not the rank-1 completion for every such
        // pattern (e.g. hiding (3, 2) and (2, 3) together stalls near 30%).
        let hidden = [(0, 2), (1, 1), (2, 0), (3, 3)];
        let mask = ObservationMask::complement_of(4, 4, &hidden).unwrap();
        let out = soft_impute(&m, &mask, &SoftImputeConfig::default()).unwrap();
        for &(i, j) in &hidden {
            let truth = rank_one_oracle(&m, &mask, i, j);
            assert!((truth - m.get(i, j)).abs() < 1e-12);
            let rel = (out.matrix.get(i, j) - truth).abs() / truth.abs();
            assert!(rel < 0.05, "({i},{j}) rel err {rel}");
        }
    }

    #[test]
    fn reconstruct_changes_only_removed_entries() {
        let m = rank_one_fixture();
        let out = reconstruct(&m, &[(2, 1)], &SoftImputeConfig::default()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if (i, j) != (2, 1) {
                    assert_eq!(out.matrix.get(i, j).to_bits(), m.get(i, j).to_bits());
                }
            }
        }
        let rel = (out.matrix.get(2, 1) - 1.5).abs() / 1.5;
        assert!(rel < 0.05);

        let same = reconstruct(&m, &[], &SoftImputeConfig::default()).unwrap();
        assert_eq!(same.matrix, m);
        assert_eq!(same.iterations, 0);
    }

    #[test]
    fn reconstruct_rejects_infeasible_removal() {
        let m = rank_one_fixture();
        let row: Vec<_> = (0..4).map(|j| (1, j)).collect();
        assert!(matches!(
            reconstruct(&m, &row, &SoftImputeConfig::default()),
            Err(Error::InfeasibleMask(_))
        ));
    }

    fn low_rank(rng: &mut impl Rng, n: usize, r: usize) -> Matrix {
        let normal = rand_distr::StandardNormal;
        let a = Matrix::from_fn(n, r, |_, _| rng.sample(normal)).unwrap();
        let b = Matrix::from_fn(r, n, |_, _| rng.sample(normal)).unwrap();
        a.matmul(&b).unwrap()
    }

    fn feasible_removal(rng: &mut impl Rng, n: usize, count: usize) -> Vec<(usize, usize)> {
        loop {
            let picks: Vec<(usize, usize)> = sample(rng, n * n, count).into_iter().map(|k| (k / n, k % n)).collect();
            if ObservationMask::complement_of(n, n, &picks).is_ok() {
                return picks;
            }
        }
    }

    fn removed_relative_error(truth: &Matrix, est: &Matrix, removed: &[(usize, usize)]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for &(i, j) in removed {
            num += (est.get(i, j) - truth.get(i, j)).powi(2);
            den += truth.get(i, j).powi(2);
        }
        (num / den).sqrt()
    }

    #[test]
    fn rank_three_twenty_percent_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let truth = low_rank(&mut rng, 50, 3);
        let removed = feasible_removal(&mut rng, 50, 500);
        let out = reconstruct(&truth, &removed, &SoftImputeConfig::default()).unwrap();
        let err = removed_relative_error(&truth, &out.matrix, &removed);
        assert!(err < 0.05, "relative error {err}");
    }

    #[test]
    fn converged_flag_matches_final_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..10 {
            let truth = low_rank(&mut rng, 20, 2);
            let removed = feasible_removal(&mut rng, 20, 80);
            let cfg = SoftImputeConfig {
                max_iterations: if trial % 2 == 0 { 3 } else { 100 },
                ..Default::default()
            };
            let out = reconstruct(&truth, &removed, &cfg).unwrap();
            assert_eq!(out.relative_changes.len(), out.iterations);
            if out.converged {
                assert!(out.final_relative_change <= cfg.epsilon);
            } else {
                assert_eq!(out.iterations, cfg.max_iterations);
            }
        }
    }

    #[test]
    fn shrinkage_does_not_inflate_nuclear_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let truth = low_rank(&mut rng, 30, 2);
            let removed = feasible_removal(&mut rng, 30, 270);
            let mask = ObservationMask::complement_of(30, 30, &removed).unwrap();
            let out = soft_impute(&truth, &mask, &SoftImputeConfig::default()).unwrap();
            let zero_filled = project(&truth, &mask, true).unwrap();
            assert!(nuclear_norm(&out.matrix).unwrap() <= nuclear_norm(&zero_filled).unwrap() + 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        let bad = SoftImputeConfig {
            zeta: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SoftImputeConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
