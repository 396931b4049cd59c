//! Exact linear assignment on square cost matrices.
//!
//! Shortest-augmenting-path formulation with dual potentials, O(n³), plus a
//! refinement pass that breaks cost ties toward the lexicographically
//! smallest row-to-column permutation (labels with several equally cheap
//! prompts are common, so tie order must be pinned for reproducibility).

use super::MatchError;

/// Square matrix with flat row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, MatchError> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in &rows {
            if row.len() != n {
                return Err(MatchError::NotSquare {
                    rows: n,
                    cols: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(SquareMatrix { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.n + col] = value;
    }
}

/// Optimal label-to-prompt permutation with its cost matrix.
#[derive(Clone, Debug)]
pub struct Assignment {
    /// `sigma[label] = prompt`; a bijection on `0..n`.
    pub sigma: Vec<usize>,
    /// Sum of the cost matrix along `sigma`.
    pub total_cost: f64,
    pub cost_matrix: SquareMatrix,
}

/// Minimum-cost assignment over the rows of a subproblem.
///
/// `rows` and `cols` select a square submatrix; returns (row -> position in
/// `cols`) and the optimal cost. The classic potential-based algorithm.
fn solve_sub(cost: &SquareMatrix, rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    let n = rows.len();
    debug_assert_eq!(n, cols.len());
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let big = f64::INFINITY;
    // 1-based columns; p[j] = row (1-based) matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![big; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = big;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.at(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n)
        .map(|i| cost.at(rows[i], cols[row_to_col[i]]))
        .sum();
    (row_to_col, total)
}

/// Relative tolerance for "same optimal cost" during tie refinement.
const TIE_EPS: f64 = 1e-9;

/// Solve the assignment problem, breaking ties toward the lexicographically
/// smallest sigma. Non-finite entries are rejected.
pub fn hungarian_solve(cost_matrix: SquareMatrix) -> Result<Assignment, MatchError> {
    let n = cost_matrix.n();
    for r in 0..n {
        for c in 0..n {
            if !cost_matrix.at(r, c).is_finite() {
                return Err(MatchError::NonFiniteCost { row: r, col: c });
            }
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let (_, optimal) = solve_sub(&cost_matrix, &all, &all);
    let eps = TIE_EPS * optimal.abs().max(1.0);

    // Fix sigma row by row: take the smallest column whose best completion
    // still reaches the optimal total.
    let mut sigma = vec![0usize; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut prefix = 0.0;
    for i in 0..n {
        let sub_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (pos, &c) in remaining.iter().enumerate() {
            let mut sub_cols = remaining.clone();
            sub_cols.remove(pos);
            let (_, completion) = solve_sub(&cost_matrix, &sub_rows, &sub_cols);
            let total = prefix + cost_matrix.at(i, c) + completion;
            if total <= optimal + eps {
                chosen = Some(pos);
                break;
            }
        }
        let pos = chosen.expect("some remaining column must complete optimally");
        let c = remaining.remove(pos);
        sigma[i] = c;
        prefix += cost_matrix.at(i, c);
    }

    let total_cost = (0..n).map(|i| cost_matrix.at(i, sigma[i])).sum();
    Ok(Assignment {
        sigma,
        total_cost,
        cost_matrix,
    })
}

#[cfg(test)]
pub(crate) fn brute_force_min(cost: &SquareMatrix) -> (Vec<usize>, f64) {
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        let mut items: Vec<usize> = (0..n).collect();
        heap_permute(&mut items, n, &mut out);
        out.sort(); // lexicographic enumeration order
        out
    }
    fn heap_permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..k {
            heap_permute(items, k - 1, out);
            if k % 2 == 0 {
                items.swap(i, k - 1);
            } else {
                items.swap(0, k - 1);
            }
        }
    }
    let n = cost.n();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in permutations(n) {
        let total: f64 = (0..n).map(|i| cost.at(i, perm[i])).sum();
        match &best {
            Some((_, t)) if total >= *t => {}
            _ => best = Some((perm, total)),
        }
    }
    best.unwrap_or((Vec::new(), 0.0))
}
