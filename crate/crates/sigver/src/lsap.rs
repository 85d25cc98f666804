//! Exact solver for the linear sum assignment problem.
//!
//! Shortest-augmenting-path algorithm with dual variables (Jonker-Volgenant
//! style), O(n^3) worst case. Entries at or above [`FORBIDDEN`] mark
//! assignments that must not be used.

use thiserror::Error;

/// Cost entries at or above this sentinel are treated as forbidden.
pub const FORBIDDEN: f64 = 1e30;

#[derive(Error, Debug)]
pub enum LsapError {
    #[error("cost matrix must be square: {rows} rows, {len} entries")]
    NotSquare { rows: usize, len: usize },
    #[error("cost entries must be finite non-negative or forbidden, got {value} at ({row},{col})")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("no finite perfect assignment exists")]
    InfeasibleMatrix,
}

/// Square matrix of non-negative assignment costs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    /// Validates shape and entries; negative or NaN entries are rejected,
    /// `+inf` and values above [`FORBIDDEN`] are kept as forbidden.
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self, LsapError> {
        if entries.len() != n * n {
            return Err(LsapError::NotSquare {
                rows: n,
                len: entries.len(),
            });
        }
        for (i, &v) in entries.iter().enumerate() {
            if v.is_nan() || v < 0.0 {
                return Err(LsapError::InvalidEntry {
                    row: i / n,
                    col: i % n,
                    value: v,
                });
            }
        }
        Ok(Self { n, entries })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, LsapError> {
        let n = rows.len();
        let entries: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(n, entries)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }

    pub fn transpose(&self) -> Self {
        let mut entries = vec![0.0; self.n * self.n];
        for r in 0..self.n {
            for c in 0..self.n {
                entries[c * self.n + r] = self.entries[r * self.n + c];
            }
        }
        Self {
            n: self.n,
            entries,
        }
    }
}

/// Minimum-cost bijection rows -> columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `permutation[row] = column`
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

/// Solve the LSAP exactly. Cost optimality is contractual; which optimal
/// permutation is returned when ties exist is not.
pub fn solve(matrix: &CostMatrix) -> Result<Assignment, LsapError> {
    let n = matrix.n;
    if n == 0 {
        return Ok(Assignment {
            permutation: Vec::new(),
            total_cost: 0.0,
        });
    }

    let cost = |r: usize, c: usize| -> f64 {
        let v = matrix.entries[r * n + c];
        if v >= FORBIDDEN {
            f64::INFINITY
        } else {
            v
        }
    };

    // row potential u, column potential v; p[j] = row assigned to column j,
    // with column n as the virtual start column of each augmentation
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![usize::MAX; n + 1];

    for row in 0..n {
        p[n] = row;
        let mut j0 = n;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut way = vec![n; n + 1];
        let mut used = vec![false; n + 1];

        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0, j) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            if !delta.is_finite() {
                return Err(LsapError::InfeasibleMatrix);
            }
            for j in 0..=n {
                if used[j] {
                    if p[j] != usize::MAX {
                        u[p[j]] += delta;
                    }
                    v[j] -= delta;
                } else if min_to[j].is_finite() {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == usize::MAX {
                break;
            }
        }

        // augment along the alternating path back to the virtual column
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }

    let mut permutation = vec![usize::MAX; n];
    for j in 0..n {
        permutation[p[j]] = j;
    }
    let total_cost = permutation
        .iter()
        .enumerate()
        .map(|(r, &c)| matrix.entries[r * n + c])
        .sum();
    Ok(Assignment {
        permutation,
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Exhaustive minimum over all permutations; independent of the solver.
    fn brute_force_min(matrix: &CostMatrix) -> f64 {
        fn recurse(matrix: &CostMatrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
            let n = matrix.dim();
            if row == n {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            for col in 0..n {
                if used[col] {
                    continue;
                }
                let c = matrix.get(row, col);
                if c >= FORBIDDEN {
                    continue;
                }
                used[col] = true;
                recurse(matrix, row + 1, used, acc + c, best);
                used[col] = false;
            }
        }
        let mut best = f64::INFINITY;
        let mut used = vec![false; matrix.dim()];
        recurse(matrix, 0, &mut used, 0.0, &mut best);
        best
    }

    #[test]
    fn one_by_one() {
        let m = CostMatrix::from_rows(vec![vec![7.0]]).unwrap();
        let a = solve(&m).unwrap();
        assert_eq!(a.permutation, vec![0]);
        assert_eq!(a.total_cost, 7.0);
    }

    #[test]
    fn identity_cost_matrix_deranges_for_free() {
        let m = CostMatrix::from_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let a = solve(&m).unwrap();
        assert_eq!(a.total_cost, 0.0);
        for (r, &c) in a.permutation.iter().enumerate() {
            assert_ne!(r, c, "diagonal entry chosen");
        }
    }

    #[test]
    fn random_6x6_matches_exhaustive_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(0x5a);
        for _ in 0..1000 {
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..6).map(|_| rng.gen_range(0.0..100.0)).collect())
                .collect();
            let m = CostMatrix::from_rows(rows).unwrap();
            let a = solve(&m).unwrap();
            let expected = brute_force_min(&m);
            assert!(
                (a.total_cost - expected).abs() <= 1e-9 * expected.max(1.0),
                "solver {} vs oracle {}",
                a.total_cost,
                expected
            );
            // the reported cost must equal the permutation it claims
            let recomputed: f64 = a
                .permutation
                .iter()
                .enumerate()
                .map(|(r, &c)| m.get(r, c))
                .sum();
            assert_eq!(a.total_cost, recomputed);
        }
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for n in 1..=8 {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..10.0)).collect())
                .collect();
            let a = solve(&CostMatrix::from_rows(rows).unwrap()).unwrap();
            let mut seen = vec![false; n];
            for &c in &a.permutation {
                assert!(!seen[c]);
                seen[c] = true;
            }
        }
    }

    #[test]
    fn forbidden_entries_force_the_other_diagonal() {
        let inf = f64::INFINITY;
        let m = CostMatrix::from_rows(vec![vec![inf, 3.0], vec![5.0, inf]]).unwrap();
        let a = solve(&m).unwrap();
        assert_eq!(a.permutation, vec![1, 0]);
        assert_eq!(a.total_cost, 8.0);
    }

    #[test]
    fn infeasible_matrix_is_reported() {
        let inf = f64::INFINITY;
        // column 0 unusable by anyone
        let m = CostMatrix::from_rows(vec![vec![inf, 1.0], vec![inf, 1.0]]).unwrap();
        assert!(matches!(solve(&m), Err(LsapError::InfeasibleMatrix)));
    }

    #[test]
    fn rejects_negative_and_nan_entries() {
        assert!(CostMatrix::from_rows(vec![vec![-1.0]]).is_err());
        assert!(CostMatrix::from_rows(vec![vec![f64::NAN]]).is_err());
        assert!(CostMatrix::new(2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn transpose_preserves_optimal_cost() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for _ in 0..50 {
            let n = rng.gen_range(1..7);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..50.0)).collect())
                .collect();
            let m = CostMatrix::from_rows(rows).unwrap();
            let c1 = solve(&m).unwrap().total_cost;
            let c2 = solve(&m.transpose()).unwrap().total_cost;
            assert!((c1 - c2).abs() <= 1e-9 * c1.max(1.0));
        }
    }

    #[test]
    fn row_shift_moves_cost_by_the_constant() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        for _ in 0..50 {
            let n = rng.gen_range(2..7);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..50.0)).collect())
                .collect();
            let m = CostMatrix::from_rows(rows.clone()).unwrap();
            let base = solve(&m).unwrap().total_cost;

            let shift = 7.25;
            let mut shifted = rows;
            for v in &mut shifted[0] {
                *v += shift;
            }
            let m2 = CostMatrix::from_rows(shifted).unwrap();
            let moved = solve(&m2).unwrap().total_cost;
            assert!((moved - (base + shift)).abs() <= 1e-9 * (base + shift).max(1.0));
        }
    }

    #[test]
    fn scaling_costs_scales_the_optimum() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        for _ in 0..50 {
            let n = rng.gen_range(1..7);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..50.0)).collect())
                .collect();
            let alpha = rng.gen_range(0.1..5.0);
            let m = CostMatrix::from_rows(rows.clone()).unwrap();
            let scaled_rows: Vec<Vec<f64>> =
                rows.iter().map(|r| r.iter().map(|v| v * alpha).collect()).collect();
            let m2 = CostMatrix::from_rows(scaled_rows).unwrap();
            let c1 = solve(&m).unwrap().total_cost;
            let c2 = solve(&m2).unwrap().total_cost;
            assert!((c2 - alpha * c1).abs() <= 1e-6 * (alpha * c1).max(1.0));
        }
    }
}
