//! Minimum-cost bipartite matching (Kuhn–Munkres) with a deterministic
//! lexicographic tie-break over equal-cost assignments.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimal assignment of rows to columns of a square cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `assignment[i]` is the column matched to row `i`; a bijection.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

/// Shortest-augmenting-path assignment, O(n^3). Returns (row -> col, cost).
fn lap(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row assigned to col j (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    (assignment, total)
}

/// Minimum cost of assigning the free rows to the free columns.
fn residual_cost(cost: &[f64], n: usize, free_rows: &[usize], free_cols: &[usize]) -> f64 {
    let m = free_rows.len();
    if m == 0 {
        return 0.0;
    }
    let mut sub = vec![0.0; m * m];
    for (a, &i) in free_rows.iter().enumerate() {
        for (b, &j) in free_cols.iter().enumerate() {
            sub[a * m + b] = cost[i * n + j];
        }
    }
    lap(&sub, m).1
}

/// Minimum-cost assignment; among equal-cost optima, the lexicographically
/// smallest row->col vector is returned.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    let shape = cost.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("cost matrix must be square, got {:?}", shape)));
    }
    if !cost.all_finite() {
        return Err(Error::numeric("non-finite entry in cost matrix"));
    }
    let n = shape[0];
    let c = cost.data_f64();
    let (_, opt) = lap(&c, n);
    let tol = 1e-9 * (1.0 + opt.abs());

    // Fix rows in order to the smallest column that still reaches the optimum.
    let mut assignment = vec![0usize; n];
    let mut used = vec![false; n];
    let mut fixed_cost = 0.0;
    for i in 0..n {
        let free_rows: Vec<usize> = ((i + 1)..n).collect();
        let mut chosen = None;
        for j in 0..n {
            if used[j] {
                continue;
            }
            let free_cols: Vec<usize> =
                (0..n).filter(|&k| !used[k] && k != j).collect();
            let rest = residual_cost(&c, n, &free_rows, &free_cols);
            if fixed_cost + c[i * n + j] + rest <= opt + tol {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("some column must complete an optimal assignment");
        assignment[i] = j;
        used[j] = true;
        fixed_cost += c[i * n + j];
    }

    let total_cost = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| c[i * n + j])
        .sum();
    Ok(MatchResult {
        assignment,
        total_cost,
    })
}
