//! Minimum-cost bipartite assignment between queries and ground truth.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Matched `(query_index, gt_index)` pairs, ordered by gt. Queries without a
/// pair are supervised as "no object".
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn query_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }

    pub fn gt_for(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == query).map(|p| p.1)
    }

    pub fn total_cost(&self, cost: &[f64], gts: usize) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost[q * gts + g]).sum()
    }
}

/// Kuhn–Munkres with row/column potentials on a row-major `[N, G]` cost
/// matrix. Every gt gets exactly one query; `O(G²·N)`.
pub fn hungarian_match(cost: &[f64], queries: usize, gts: usize) -> Result<Assignment> {
    if cost.len() != queries * gts {
        return Err(Error::DataLength { len: cost.len(), shape: vec![queries, gts] });
    }
    if gts > queries {
        return Err(Error::TooManyTargets { queries, gts });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(invalid("hungarian_match: non-finite cost"));
    }
    if gts == 0 {
        return Ok(Assignment::default());
    }
    // rows are gts (1-based), columns are queries (1-based); column 0 is the virtual start
    let (n, m) = (gts, queries);
    let at = |row: usize, col: usize| cost[(col - 1) * gts + (row - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = at(i0, j) - u[i0] - v[j];
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
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (j - 1, owner[j] - 1)).collect();
    pairs.sort_by_key(|p| p.1);
    Ok(Assignment { pairs })
}

/// Exhaustive minimum over all injections gt → query. Exponential; for tests.
pub fn brute_force_min(cost: &[f64], queries: usize, gts: usize) -> f64 {
    fn go(cost: &[f64], queries: usize, gts: usize, g: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if g == gts {
            *best = best.min(acc);
            return;
        }
        for q in 0..queries {
            if !used[q] {
                used[q] = true;
                go(cost, queries, gts, g + 1, used, acc + cost[q * gts + g], best);
                used[q] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, queries, gts, 0, &mut vec![false; queries], 0.0, &mut best);
    best
}
