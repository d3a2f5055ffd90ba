//! Exact minimum-cost assignment (Hungarian algorithm with potentials).
//!
//! Matching between predicted queries and ground-truth boxes must be optimal
//! and reproducible. Optimal solutions can tie; to make training runs
//! byte-for-byte repeatable the result is pinned to the lexicographically
//! smallest optimal assignment (row 0's column first, then row 1's, ...,
//! unmatched rows sort after every real column).

use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// (row, column) pairs, sorted by row; exactly `min(rows, cols)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

/// Shortest-augmenting-path solver for `rows <= cols`. Returns, for each
/// column, the matched row (or None). Any optimal solution.
fn solve_rows_le_cols(cost: &Array2<f64>) -> Vec<Option<usize>> {
    let n = cost.nrows();
    let m = cost.ncols();
    debug_assert!(n <= m);
    // 1-indexed potentials, p[j] = row matched to column j (0 = free).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut row_of_col = vec![None; m];
    for j in 1..=m {
        if p[j] != 0 {
            row_of_col[j - 1] = Some(p[j] - 1);
        }
    }
    row_of_col
}

/// Minimum total cost of a maximum-size matching; any optimal solution.
fn solve_any(cost: &Array2<f64>) -> Assignment {
    let (n, m) = (cost.nrows(), cost.ncols());
    if n == 0 || m == 0 {
        return Assignment { pairs: vec![], total: 0.0 };
    }
    let mut pairs: Vec<(usize, usize)> = if n <= m {
        solve_rows_le_cols(cost)
            .into_iter()
            .enumerate()
            .filter_map(|(j, r)| r.map(|r| (r, j)))
            .collect()
    } else {
        let t = cost.t().to_owned();
        solve_rows_le_cols(&t)
            .into_iter()
            .enumerate()
            .filter_map(|(j, r)| r.map(|r| (j, r)))
            .collect()
    };
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cost[[r, c]]).sum();
    Assignment { pairs, total }
}

fn sub_matrix(cost: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| cost[[rows[i], cols[j]]])
}

/// Lexicographically smallest optimal assignment: walk rows in order and fix
/// the cheapest-index column that keeps the total optimal; a row is left
/// unmatched only when every optimal solution leaves it unmatched.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Assignment {
    let (n, m) = (cost.nrows(), cost.ncols());
    if n == 0 || m == 0 {
        return Assignment { pairs: vec![], total: 0.0 };
    }
    let best = solve_any(cost).total;
    let tol = 1e-9 * (1.0 + best.abs());
    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut fixed_cost = 0.0;
    let mut free_cols: Vec<usize> = (0..m).collect();
    let mut remaining_rows: Vec<usize> = (0..n).collect();

    for r in 0..n {
        remaining_rows.retain(|&x| x != r);
        let mut chosen = None;
        for (ci, &c) in free_cols.iter().enumerate() {
            let rest = solve_any(&sub_matrix(cost, &remaining_rows, &{
                let mut fc = free_cols.clone();
                fc.remove(ci);
                fc
            }));
            // The sub-solution must still saturate min(rows, cols) pairs.
            let need = remaining_rows.len().min(free_cols.len() - 1);
            if rest.pairs.len() < need {
                continue;
            }
            let total = fixed_cost + cost[[r, c]] + rest.total;
            if total <= best + tol {
                chosen = Some((ci, c));
                break;
            }
        }
        if let Some((ci, c)) = chosen {
            fixed.push((r, c));
            fixed_cost += cost[[r, c]];
            free_cols.remove(ci);
        }
        if free_cols.is_empty() {
            break;
        }
    }
    let total = fixed.iter().map(|&(r, c)| cost[[r, c]]).sum();
    Assignment { pairs: fixed, total }
}
