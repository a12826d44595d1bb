//! Rectangular linear assignment (Hungarian method with row/column
//! potentials, O(n^2 m)).

use crate::linalg::Mat;

/// One-to-one assignment of rows to columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_to_col[r]` is the column matched to row `r`, if any.
    pub row_to_col: Vec<Option<usize>>,
    /// Sum of the matched entries, accumulated in row order.
    pub total: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_to_col
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
    }
}

/// Maximum-total assignment. Every row is matched when `rows <= cols`,
/// otherwise every column is.
pub fn solve_max(scores: &Mat) -> Assignment {
    let mut neg = scores.clone();
    neg.scale(-1.0);
    let row_to_col = solve_min_inner(&neg);
    finish(scores, row_to_col)
}

/// Minimum-total assignment.
pub fn solve_min(costs: &Mat) -> Assignment {
    let row_to_col = solve_min_inner(costs);
    finish(costs, row_to_col)
}

fn finish(m: &Mat, row_to_col: Vec<Option<usize>>) -> Assignment {
    let total = row_to_col
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| m[(r, c)]))
        .sum();
    Assignment { row_to_col, total }
}

fn solve_min_inner(costs: &Mat) -> Vec<Option<usize>> {
    let (n, m) = costs.shape();
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    if n > m {
        let t = solve_min_inner(&costs.transpose());
        let mut out = vec![None; n];
        for (c, r) in t.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }

    // 1-based potentials formulation; column 0 is a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = costs[(i0 - 1, j - 1)] - u[i0] - v[j];
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

    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] > 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}
