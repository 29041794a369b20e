//! Minimum-cost assignment via shortest augmenting paths with potentials,
//! O(n^3). Rectangular inputs are padded to square with zero-cost dummy
//! columns/rows; callers filter out pairings they consider forbidden.

use ndarray::Array2;

/// Cost for pairs that must never be chosen over any real pairing. Large
/// enough to dominate, small enough to keep the arithmetic exact.
pub const FORBIDDEN: f64 = 1e6;

/// Row-to-column assignment minimizing total cost of a square matrix.
pub fn solve_square(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "hungarian: matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays with a virtual column 0, the standard formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
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
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Rectangular assignment: returns (row, col) pairs covering min(rows, cols)
/// real cells, minimizing total cost. Padding cells cost 0.
pub fn solve(cost: &Array2<f64>) -> Vec<(usize, usize)> {
    let (r, c) = (cost.nrows(), cost.ncols());
    let n = r.max(c);
    let padded = Array2::from_shape_fn((n, n), |(i, j)| {
        if i < r && j < c {
            cost[[i, j]]
        } else {
            0.0
        }
    });
    solve_square(&padded)
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < r && j < c)
        .collect()
}

/// Exhaustive minimum over all assignments; oracle for tests, O(n!).
pub fn brute_force_min_cost(cost: &Array2<f64>) -> f64 {
    let (r, c) = (cost.nrows(), cost.ncols());
    let n = r.max(c);
    let mut cols: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut cols, 0, &mut |perm| {
        let mut total = 0.0;
        for (i, &j) in perm.iter().enumerate().take(r) {
            if j < c {
                total += cost[[i, j]];
            }
        }
        if total < best {
            best = total;
        }
    });
    best
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

pub fn total_cost(cost: &Array2<f64>, assignment: &[(usize, usize)]) -> f64 {
    assignment.iter().map(|&(i, j)| cost[[i, j]]).sum()
}
