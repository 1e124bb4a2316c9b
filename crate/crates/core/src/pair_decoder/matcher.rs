//! Minimum-cost one-to-one assignment between pair queries and ground-truth pairs.

use thiserror::Error;

use crate::autograd::focal_value;
use crate::boxes::BBox;
use crate::losses::{LossWeights, PairTarget};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("non-finite cost at ({row}, {col}): {value}")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("ragged cost matrix: row {row} has {len} entries, expected {expected}")]
    Ragged { row: usize, len: usize, expected: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(query_index, gt_index)` sorted by query index.
    pub assignment: Vec<(usize, usize)>,
    /// Sum of the assigned costs, accumulated in ascending query order.
    pub total_cost: f64,
}

/// Weights of the three matching-cost terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub w_score: f64,
    pub w_l1: f64,
    pub w_giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_score: 2.0,
            w_l1: 5.0,
            w_giou: 2.0,
        }
    }
}

/// Globally optimal assignment for a rectangular cost matrix (`rows x cols`).
///
/// Covers `min(rows, cols)` pairs. Shortest augmenting path with potentials, `O(n^2 m)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult, MatchError> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    for (r, row) in cost.iter().enumerate() {
        if row.len() != cols {
            return Err(MatchError::Ragged {
                row: r,
                len: row.len(),
                expected: cols,
            });
        }
        for (c, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(MatchError::NonFinite { row: r, col: c, value: v });
            }
        }
    }
    if rows == 0 || cols == 0 {
        return Ok(MatchResult {
            assignment: vec![],
            total_cost: 0.0,
        });
    }
    let mut assignment = if rows <= cols {
        solve(rows, cols, |r, c| cost[r][c])
    } else {
        solve(cols, rows, |r, c| cost[c][r])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    assignment.sort_unstable();
    let total_cost = assignment.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(MatchResult {
        assignment,
        total_cost,
    })
}

/// Requires `n <= m`; returns `(row, col)` for every row.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: 1-based row matched to column j (0 = free).
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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
    (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect()
}

/// Predicted values of one query, as seen by the matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPrediction {
    /// Per view: `[subject, object]` xyxy boxes.
    pub boxes: Vec<[BBox; 2]>,
    /// Subject and object presence probabilities.
    pub scores: [f64; 2],
}

/// Focal-style classification cost: positive focal minus negative focal.
fn score_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    focal_value(p, 1.0, alpha, gamma) - focal_value(p, 0.0, alpha, gamma)
}

/// `Q x G` matching cost: box L1 + (1 - GIoU) over views and roles, plus presence cost.
pub fn matching_cost(
    preds: &[QueryPrediction],
    targets: &[PairTarget],
    weights: &CostWeights,
    loss: &LossWeights,
) -> Vec<Vec<f64>> {
    preds
        .iter()
        .map(|p| {
            let presence: f64 = p
                .scores
                .iter()
                .map(|&s| score_cost(s, loss.focal_alpha, loss.focal_gamma))
                .sum();
            targets
                .iter()
                .map(|t| {
                    let mut l1 = 0.0;
                    let mut gi = 0.0;
                    for (pv, tv) in p.boxes.iter().zip(&t.boxes) {
                        for role in 0..2 {
                            if let Some(tb) = &tv[role] {
                                let pb = &pv[role];
                                l1 += pb
                                    .to_array()
                                    .iter()
                                    .zip(tb.to_array())
                                    .map(|(a, b)| (a - b).abs())
                                    .sum::<f64>()
                                    / 4.0;
                                gi += 1.0 - pb.giou(tb);
                            }
                        }
                    }
                    weights.w_l1 * l1 + weights.w_giou * gi + weights.w_score * presence
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over injections, summed in ascending row order.
    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let rows = cost.len();
        let cols = cost[0].len();
        fn rec(
            cost: &[Vec<f64>],
            r: usize,
            used: &mut Vec<bool>,
            chosen: &mut Vec<(usize, usize)>,
            need: usize,
            best: &mut f64,
        ) {
            if chosen.len() == need {
                let mut c = chosen.clone();
                c.sort_unstable();
                let s: f64 = c.iter().map(|&(i, j)| cost[i][j]).sum();
                if s < *best {
                    *best = s;
                }
                return;
            }
            if r == cost.len() || cost.len() - r < need - chosen.len() {
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    chosen.push((r, j));
                    rec(cost, r + 1, used, chosen, need, best);
                    chosen.pop();
                    used[j] = false;
                }
            }
            rec(cost, r + 1, used, chosen, need, best);
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cols], &mut vec![], rows.min(cols), &mut best);
        best
    }

    #[test]
    fn small_examples() {
        let m = hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(m.assignment, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost, 2.0);
        let m = hungarian(&[vec![0.0, 5.0], vec![5.0, 0.0]]).unwrap();
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn rectangular_both_ways() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]];
        let m = hungarian(&c).unwrap();
        assert_eq!(m.assignment.len(), 2);
        assert_eq!(m.total_cost, brute_force(&c));
        let t: Vec<Vec<f64>> = (0..3).map(|j| (0..2).map(|i| c[i][j]).collect()).collect();
        let mt = hungarian(&t).unwrap();
        assert_eq!(mt.assignment.len(), 2);
        assert_eq!(mt.total_cost, brute_force(&t));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            hungarian(&[vec![1.0, f64::NAN]]),
            Err(MatchError::NonFinite { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn random_5x5_equals_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let c: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..5).map(|_| rng.gen_range(0.0..10.0)).collect())
                .collect();
            let m = hungarian(&c).unwrap();
            assert_eq!(m.total_cost, brute_force(&c));
            let mut cols: Vec<usize> = m.assignment.iter().map(|x| x.1).collect();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(cols.len(), 5);
        }
    }
}
