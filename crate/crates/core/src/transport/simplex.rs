//! Transportation simplex (MODI) with Bland's pivoting rule.
//!
//! The basis is kept as a spanning tree over `rows + cols` nodes with exactly
//! `rows + cols - 1` basic cells, degenerate zero-flow cells included.

use std::collections::VecDeque;

use super::{Distance, PlanMethod, TransportPlan, TransportProblem};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Largest `L1 * L2` accepted by [`exact_emd`].
pub const EXACT_SCALE_LIMIT: usize = 4096;

const REDUCED_COST_TOL: f64 = 1e-12;

struct Tableau {
    rows: usize,
    cols: usize,
    flow: DenseMatrix,
    basic: Vec<bool>,
    basis: Vec<(usize, usize)>,
}

impl Tableau {
    /// Northwest-corner start. Moves exactly one step per cell so the basis
    /// is a staircase tree even when a row and column exhaust together.
    fn northwest(d1: &[f64], d2: &[f64]) -> Self {
        let (rows, cols) = (d1.len(), d2.len());
        let mut supply = d1.to_vec();
        let mut demand = d2.to_vec();
        let mut flow = DenseMatrix::zeros(rows, cols);
        let mut basic = vec![false; rows * cols];
        let mut basis = Vec::with_capacity(rows + cols - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = supply[i].min(demand[j]).max(0.0);
            flow.set(i, j, x);
            basic[i * cols + j] = true;
            basis.push((i, j));
            supply[i] -= x;
            demand[j] -= x;
            if i == rows - 1 && j == cols - 1 {
                break;
            }
            if i == rows - 1 {
                j += 1;
            } else if j == cols - 1 || supply[i] <= demand[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        // Rounding leftovers land in the last cell.
        let last = flow.get(rows - 1, cols - 1);
        let leftover = supply[rows - 1].max(demand[cols - 1]).max(0.0);
        flow.set(rows - 1, cols - 1, last + leftover);
        Self {
            rows,
            cols,
            flow,
            basic,
            basis,
        }
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.rows + self.cols];
        for (k, &(i, j)) in self.basis.iter().enumerate() {
            adj[i].push((self.rows + j, k));
            adj[self.rows + j].push((i, k));
        }
        adj
    }

    fn potentials(&self, cost: &DenseMatrix, adj: &[Vec<(usize, usize)>]) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![f64::NAN; self.rows];
        let mut v = vec![f64::NAN; self.cols];
        u[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        let mut seen = vec![false; self.rows + self.cols];
        seen[0] = true;
        while let Some(node) = queue.pop_front() {
            for &(next, k) in &adj[node] {
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                let (i, j) = self.basis[k];
                if next >= self.rows {
                    v[j] = cost.get(i, j) - u[i];
                } else {
                    u[i] = cost.get(i, j) - v[j];
                }
                queue.push_back(next);
            }
        }
        (u, v)
    }

    /// Basis indices on the tree path from row node `p` to column node `q`.
    fn tree_path(&self, adj: &[Vec<(usize, usize)>], p: usize, q: usize) -> Vec<usize> {
        let target = self.rows + q;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; self.rows + self.cols];
        let mut seen = vec![false; self.rows + self.cols];
        seen[p] = true;
        let mut queue = VecDeque::from([p]);
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &(next, k) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, k));
                    queue.push_back(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = target;
        while let Some((prev, k)) = parent[node] {
            path.push(k);
            node = prev;
        }
        path.reverse();
        path
    }
}

/// Exact balanced optimal transport. Returns the optimal plan and its
/// objective (the earth mover's distance for this cost).
pub fn exact_emd(problem: &TransportProblem) -> Result<(TransportPlan, Distance)> {
    let cost = problem.cost();
    let (rows, cols) = cost.shape();
    if rows * cols > EXACT_SCALE_LIMIT {
        return Err(Error::ScaleExceeded {
            rows,
            cols,
            limit: EXACT_SCALE_LIMIT,
        });
    }
    let mut t = Tableau::northwest(problem.d1(), problem.d2());
    let max_pivots = 10 * rows * cols;
    let mut pivots = 0;
    loop {
        let adj = t.adjacency();
        let (u, v) = t.potentials(cost, &adj);
        // Bland: first improving cell in row-major order.
        let entering = (0..rows * cols).find(|&k| {
            let (i, j) = (k / cols, k % cols);
            !t.basic[k] && cost.get(i, j) - u[i] - v[j] < -REDUCED_COST_TOL
        });
        let Some(k) = entering else { break };
        if pivots == max_pivots {
            return Err(Error::CycleSuspected(max_pivots));
        }
        pivots += 1;
        let (p, q) = (k / cols, k % cols);
        let path = t.tree_path(&adj, p, q);
        // Path from row p to column q has odd length; the first edge shares
        // row p with the entering cell and loses flow, then signs alternate.
        let donors: Vec<usize> = path.iter().copied().step_by(2).collect();
        let theta = donors
            .iter()
            .map(|&b| {
                let (i, j) = t.basis[b];
                t.flow.get(i, j)
            })
            .fold(f64::INFINITY, f64::min);
        let leaving = donors
            .iter()
            .copied()
            .filter(|&b| {
                let (i, j) = t.basis[b];
                t.flow.get(i, j) == theta
            })
            .min_by_key(|&b| t.basis[b])
            .expect("cycle has at least one donor");
        for (step, &b) in path.iter().enumerate() {
            let (i, j) = t.basis[b];
            let x = t.flow.get(i, j);
            let next = if step % 2 == 0 { x - theta } else { x + theta };
            t.flow.set(i, j, next.max(0.0));
        }
        t.flow.set(p, q, theta);
        let (li, lj) = t.basis[leaving];
        t.flow.set(li, lj, 0.0);
        t.basic[li * cols + lj] = false;
        t.basic[k] = true;
        t.basis[leaving] = (p, q);
    }
    let value = t
        .flow
        .as_slice()
        .iter()
        .zip(cost.as_slice())
        .map(|(x, c)| x * c)
        .sum();
    Ok((
        TransportPlan::dense(t.flow, PlanMethod::Exact),
        Distance {
            value,
            method: PlanMethod::Exact,
        },
    ))
}
