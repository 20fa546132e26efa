//! Optimal assignment between equal-size point sets: exact Hungarian for
//! small sets, epsilon-scaling auction for larger ones.

use crate::error::{Error, Result};
use crate::model::Vec3;

/// Largest size solved exactly.
pub const EXACT_LIMIT: usize = 64;
/// Target relative optimality gap of the auction.
pub const AUCTION_GAP: f64 = 0.01;

fn cost_matrix(a: &[Vec3], b: &[Vec3]) -> Vec<f64> {
    let mut c = Vec::with_capacity(a.len() * b.len());
    for p in a {
        for q in b {
            c.push((p - q).norm());
        }
    }
    c
}

/// Minimum-cost perfect assignment of an `n x n` row-major cost matrix,
/// returning the column of every row (shortest augmenting path with potentials).
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
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
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    col_of
}

/// Auction assignment whose total cost is within `n * eps_final` of optimal.
pub fn auction(cost: &[f64], n: usize, eps_final: f64) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let max_cost = cost.iter().copied().fold(0.0, f64::max);
    let eps_final = eps_final.max(1e-15 * max_cost.max(1e-300));
    let mut eps = (max_cost / 4.0).max(eps_final);
    let mut price = vec![0.0f64; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut col_of: Vec<Option<usize>> = vec![None; n];
    loop {
        owner.iter_mut().for_each(|o| *o = None);
        col_of.iter_mut().for_each(|c| *c = None);
        let mut queue: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = queue.pop() {
            let row = &cost[i * n..(i + 1) * n];
            // maximize value = -cost - price
            let (mut best, mut best_v, mut second_v) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for j in 0..n {
                let val = -row[j] - price[j];
                if val > best_v {
                    second_v = best_v;
                    best_v = val;
                    best = j;
                } else if val > second_v {
                    second_v = val;
                }
            }
            let gap = if second_v.is_finite() { best_v - second_v } else { 0.0 };
            price[best] += gap + eps;
            if let Some(prev) = owner[best].replace(i) {
                col_of[prev] = None;
                queue.push(prev);
            }
            col_of[i] = Some(best);
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps / 5.0).max(eps_final);
    }
    col_of.into_iter().map(|c| c.expect("auction assigns every row")).collect()
}

/// Mean matched distance under the optimal bijection.
pub fn emd(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "emd needs equal sizes, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("emd of empty point sets".into()));
    }
    let n = a.len();
    let cost = cost_matrix(a, b);
    let assignment = if n <= EXACT_LIMIT {
        hungarian(&cost, n)
    } else {
        auction(&cost, n, AUCTION_GAP * lower_bound(&cost, n) / n as f64)
    };
    Ok(assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

/// A lower bound on the optimal total cost: the larger of the row-minimum and column-minimum sums.
pub fn lower_bound(cost: &[f64], n: usize) -> f64 {
    let rows: f64 = (0..n)
        .map(|i| cost[i * n..(i + 1) * n].iter().copied().fold(f64::INFINITY, f64::min))
        .sum();
    let cols: f64 = (0..n)
        .map(|j| (0..n).map(|i| cost[i * n + j]).fold(f64::INFINITY, f64::min))
        .sum();
    rows.max(cols)
}
