//! Transportation problems over token embeddings.
//!
//! A sentence distance is read as the cost of moving token mass from one
//! sentence to the other. Three solvers are provided:
//!
//! - [`exact_emd`]: the full balanced LP, solved by the transportation
//!   simplex. Only meant for small oracle-scale problems.
//! - [`avg_decomposition`]: cosine of average-pooled embeddings written as a
//!   rank-1 plan against a norm-adjusted cost.
//! - [`rcmd1`] / [`rcmd2`]: the problem with one marginal dropped, whose
//!   optimum is a per-row (per-column) minimum of the cosine cost.

mod simplex;

use serde::Serialize;

use crate::embedding::{avg_pool, TokenMatrix};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub use simplex::{exact_emd, EXACT_SCALE_LIMIT};

/// Tolerance used for simplex membership checks.
pub const MASS_TOL: f64 = 1e-9;

/// Norms below this make a pooled embedding unusable.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PlanMethod {
    Exact,
    Avg,
    Rcmd1,
    Rcmd2,
    /// Average of the two relaxed plans; scores the bidirectional similarity.
    Rcmd,
}

impl PlanMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanMethod::Exact => "EXACT",
            PlanMethod::Avg => "AVG",
            PlanMethod::Rcmd1 => "RCMD1",
            PlanMethod::Rcmd2 => "RCMD2",
            PlanMethod::Rcmd => "RCMD",
        }
    }
}

/// Balanced transportation problem: two simplex vectors and a cost matrix.
#[derive(Debug, Clone)]
pub struct TransportProblem {
    d1: Vec<f64>,
    d2: Vec<f64>,
    cost: DenseMatrix,
}

impl TransportProblem {
    pub fn new(d1: Vec<f64>, d2: Vec<f64>, cost: DenseMatrix) -> Result<Self> {
        if d1.is_empty() || d2.is_empty() {
            return Err(Error::InvalidProblem("marginals must be nonempty".into()));
        }
        if cost.shape() != (d1.len(), d2.len()) {
            return Err(Error::ShapeMismatch {
                expected: (d1.len(), d2.len()),
                got: cost.shape(),
            });
        }
        for (name, d) in [("d1", &d1), ("d2", &d2)] {
            if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidProblem(format!(
                    "{name} has a negative or non-finite entry"
                )));
            }
            let total: f64 = d.iter().sum();
            if (total - 1.0).abs() > MASS_TOL {
                return Err(Error::InvalidProblem(format!(
                    "{name} sums to {total}, not 1"
                )));
            }
        }
        if cost.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("cost has a non-finite entry".into()));
        }
        Ok(Self { d1, d2, cost })
    }

    /// Uniform token marginals with the cosine-distance cost between `a` and `b`.
    pub fn cmd(a: &TokenMatrix, b: &TokenMatrix) -> Result<Self> {
        let cost = cmd_cost(a, b)?;
        let d1 = vec![1.0 / a.len() as f64; a.len()];
        let d2 = vec![1.0 / b.len() as f64; b.len()];
        Self::new(d1, d2, cost)
    }

    pub fn d1(&self) -> &[f64] {
        &self.d1
    }

    pub fn d2(&self) -> &[f64] {
        &self.d2
    }

    pub fn cost(&self) -> &DenseMatrix {
        &self.cost
    }
}

/// One stored plan entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanEntry {
    pub i: usize,
    pub j: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanStorage {
    Dense(DenseMatrix),
    /// Entries sorted row-major, one per (i, j).
    Sparse(Vec<PlanEntry>),
}

/// Coupling between the tokens of two sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    storage: PlanStorage,
    method: PlanMethod,
}

impl TransportPlan {
    pub fn dense(matrix: DenseMatrix, method: PlanMethod) -> Self {
        Self {
            rows: matrix.rows(),
            cols: matrix.cols(),
            storage: PlanStorage::Dense(matrix),
            method,
        }
    }

    /// Builds sparse storage; entries are sorted and coincident (i, j) pairs merged.
    pub fn sparse(
        rows: usize,
        cols: usize,
        mut entries: Vec<PlanEntry>,
        method: PlanMethod,
    ) -> Self {
        entries.sort_by_key(|e| (e.i, e.j));
        let mut merged: Vec<PlanEntry> = Vec::with_capacity(entries.len());
        for e in entries {
            match merged.last_mut() {
                Some(last) if last.i == e.i && last.j == e.j => last.mass += e.mass,
                _ => merged.push(e),
            }
        }
        Self {
            rows,
            cols,
            storage: PlanStorage::Sparse(merged),
            method,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn method(&self) -> PlanMethod {
        self.method
    }

    pub fn storage(&self) -> &PlanStorage {
        &self.storage
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.storage, PlanStorage::Sparse(_))
    }

    /// Number of stored entries (including explicit zeros in dense storage).
    pub fn stored_entries(&self) -> usize {
        match &self.storage {
            PlanStorage::Dense(m) => m.rows() * m.cols(),
            PlanStorage::Sparse(e) => e.len(),
        }
    }

    pub fn nonzeros(&self) -> usize {
        self.entries().filter(|e| e.mass != 0.0).count()
    }

    /// Stored entries in row-major order.
    pub fn entries(&self) -> Box<dyn Iterator<Item = PlanEntry> + '_> {
        match &self.storage {
            PlanStorage::Dense(m) => Box::new((0..m.rows()).flat_map(move |i| {
                (0..m.cols()).map(move |j| PlanEntry {
                    i,
                    j,
                    mass: m.get(i, j),
                })
            })),
            PlanStorage::Sparse(e) => Box::new(e.iter().copied()),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match &self.storage {
            PlanStorage::Dense(m) => m.get(i, j),
            PlanStorage::Sparse(e) => e
                .binary_search_by_key(&(i, j), |x| (x.i, x.j))
                .map(|k| e[k].mass)
                .unwrap_or(0.0),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match &self.storage {
            PlanStorage::Dense(m) => m.clone(),
            PlanStorage::Sparse(e) => {
                let mut m = DenseMatrix::zeros(self.rows, self.cols);
                for x in e {
                    m.set(x.i, x.j, x.mass);
                }
                m
            }
        }
    }

    /// Same plan in dense storage.
    pub fn densified(&self) -> Self {
        Self::dense(self.to_dense(), self.method)
    }

    /// Same plan keeping only nonzero entries.
    pub fn sparsified(&self) -> Self {
        let entries = self.entries().filter(|e| e.mass != 0.0).collect();
        Self::sparse(self.rows, self.cols, entries, self.method)
    }

    pub fn total_mass(&self) -> f64 {
        self.entries().map(|e| e.mass).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.rows];
        for e in self.entries() {
            sums[e.i] += e.mass;
        }
        sums
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for e in self.entries() {
            sums[e.j] += e.mass;
        }
        sums
    }

    /// Sparse JSON export: `[{"i":..,"j":..,"mass":..,"cost":..}]` over nonzero entries.
    pub fn to_sparse_json(&self, cost: &DenseMatrix) -> Result<String> {
        check_shape(self.shape(), cost.shape())?;
        #[derive(Serialize)]
        struct Row {
            i: usize,
            j: usize,
            mass: f64,
            cost: f64,
        }
        let rows: Vec<Row> = self
            .entries()
            .filter(|e| e.mass != 0.0)
            .map(|e| Row {
                i: e.i,
                j: e.j,
                mass: e.mass,
                cost: cost.get(e.i, e.j),
            })
            .collect();
        serde_json::to_string(&rows).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

/// Objective value of a plan, tagged with how it was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Distance {
    pub value: f64,
    pub method: PlanMethod,
}

pub(crate) fn check_shape(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch { expected, got });
    }
    Ok(())
}

fn check_dims(a: &TokenMatrix, b: &TokenMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Cosine of rows `i` of `a` and `j` of `b`, clamped to [-1, 1]. Identical
/// rows give exactly 1.
#[inline]
pub fn token_cosine(a: &TokenMatrix, i: usize, b: &TokenMatrix, j: usize) -> f64 {
    clamp_cos(dot(a.row(i), b.row(j)), a.sq_norm(i), b.sq_norm(j))
}

/// `sqrt(|x|^2 |y|^2)` rather than `|x| |y|`: for `x = y` the square root of
/// an exact square is exact.
#[inline(always)]
fn clamp_cos(dot: f64, sx: f64, sy: f64) -> f64 {
    (dot / (sx * sy).sqrt()).clamp(-1.0, 1.0)
}

/// Calls `f(i, j, cos)` for every token pair. Rows of `a` are taken four at
/// a time against pairs of rows of `b`, so each loaded coordinate feeds
/// several products. Every dot product is summed in index order, so values
/// are bit-identical to [`token_cosine`]. For a fixed `i` the `j` arrive in
/// increasing order, and vice versa.
pub fn for_each_cosine(a: &TokenMatrix, b: &TokenMatrix, mut f: impl FnMut(usize, usize, f64)) {
    let (l1, l2) = (a.len(), b.len());
    let mut i = 0;
    while i + 4 <= l1 {
        let x = [a.row(i), a.row(i + 1), a.row(i + 2), a.row(i + 3)];
        let nx = [
            a.sq_norm(i),
            a.sq_norm(i + 1),
            a.sq_norm(i + 2),
            a.sq_norm(i + 3),
        ];
        let mut j = 0;
        while j + 2 <= l2 {
            let (y0, y1) = (b.row(j), b.row(j + 1));
            let mut acc = [[0.0f64; 2]; 4];
            for k in 0..y0.len() {
                let (v0, v1) = (y0[k], y1[k]);
                for r in 0..4 {
                    let u = x[r][k];
                    acc[r][0] += u * v0;
                    acc[r][1] += u * v1;
                }
            }
            let (n0, n1) = (b.sq_norm(j), b.sq_norm(j + 1));
            for r in 0..4 {
                f(i + r, j, clamp_cos(acc[r][0], nx[r], n0));
                f(i + r, j + 1, clamp_cos(acc[r][1], nx[r], n1));
            }
            j += 2;
        }
        if j < l2 {
            for r in 0..4 {
                f(i + r, j, token_cosine(a, i + r, b, j));
            }
        }
        i += 4;
    }
    for i in i..l1 {
        for j in 0..l2 {
            f(i, j, token_cosine(a, i, b, j));
        }
    }
}

/// All pairwise token cosines.
pub fn cosine_matrix(a: &TokenMatrix, b: &TokenMatrix) -> Result<DenseMatrix> {
    check_dims(a, b)?;
    let mut out = DenseMatrix::zeros(a.len(), b.len());
    for_each_cosine(a, b, |i, j, c| out.set(i, j, c));
    Ok(out)
}

/// `M[i][j] = 1 - cos(a_i, b_j)`, every entry in [0, 2].
pub fn cmd_cost(a: &TokenMatrix, b: &TokenMatrix) -> Result<DenseMatrix> {
    check_dims(a, b)?;
    let mut out = DenseMatrix::zeros(a.len(), b.len());
    for_each_cosine(a, b, |i, j, c| out.set(i, j, 1.0 - c));
    Ok(out)
}

/// `Σ T_ij M_ij` over the stored entries of `plan`.
pub fn plan_objective(plan: &TransportPlan, cost: &DenseMatrix) -> Result<f64> {
    check_shape(plan.shape(), cost.shape())?;
    Ok(plan.entries().map(|e| e.mass * cost.get(e.i, e.j)).sum())
}

/// Output of [`avg_decomposition`].
#[derive(Debug, Clone)]
pub struct AvgDecomposition {
    pub plan: TransportPlan,
    pub cost: DenseMatrix,
    pub distance: Distance,
    /// Total mass of the plan. Generally exceeds 1: the rank-1 plan is not a
    /// feasible coupling.
    pub mass: f64,
}

/// Pooled-cosine distance `1 - cos(s1, s2)` rewritten as a transport objective:
///
/// ```text
/// T[i][j] = |x_i| |y_j| / (L1 L2 |s1| |s2|)
/// M[i][j] = |s1| |s2| / (|x_i| |y_j|) - cos(x_i, y_j)
/// ```
///
/// The plan is an outer product and therefore rank 1.
pub fn avg_decomposition(a: &TokenMatrix, b: &TokenMatrix) -> Result<AvgDecomposition> {
    check_dims(a, b)?;
    let s1 = avg_pool(a).norm();
    let s2 = avg_pool(b).norm();
    for norm in [s1, s2] {
        if norm < DEGENERATE_NORM {
            return Err(Error::DegeneratePooledEmbedding { norm });
        }
    }
    let (l1, l2) = (a.len() as f64, b.len() as f64);
    let left: Vec<f64> = a.norms().iter().map(|n| n / (l1 * s1)).collect();
    let right: Vec<f64> = b.norms().iter().map(|n| n / (l2 * s2)).collect();
    let plan = DenseMatrix::from_fn(a.len(), b.len(), |i, j| left[i] * right[j]);
    let cost = DenseMatrix::from_fn(a.len(), b.len(), |i, j| {
        s1 * s2 / (a.norm(i) * b.norm(j)) - token_cosine(a, i, b, j)
    });
    let plan = TransportPlan::dense(plan, PlanMethod::Avg);
    let value = plan_objective(&plan, &cost)?;
    let mass = plan.total_mass();
    Ok(AvgDecomposition {
        plan,
        cost,
        distance: Distance {
            value,
            method: PlanMethod::Avg,
        },
        mass,
    })
}

/// Smallest index wins ties.
fn argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, v) in values.enumerate() {
        if v < best.1 {
            best = (k, v);
        }
    }
    best
}

/// Row-relaxed optimum for a precomputed cost: mass `1/L1` at each row's
/// minimum column.
pub fn rcmd1_from_cost(cost: &DenseMatrix) -> (TransportPlan, Distance) {
    let (rows, cols) = cost.shape();
    let mass = 1.0 / rows as f64;
    let mut entries = Vec::with_capacity(rows);
    let mut total = 0.0;
    for i in 0..rows {
        let (j, m) = argmin(cost.row(i).iter().copied());
        total += m;
        entries.push(PlanEntry { i, j, mass });
    }
    let plan = TransportPlan::sparse(rows, cols, entries, PlanMethod::Rcmd1);
    let distance = Distance {
        value: total / rows as f64,
        method: PlanMethod::Rcmd1,
    };
    (plan, distance)
}

/// Column-relaxed optimum: mass `1/L2` at each column's minimum row.
pub fn rcmd2_from_cost(cost: &DenseMatrix) -> (TransportPlan, Distance) {
    let (rows, cols) = cost.shape();
    let mass = 1.0 / cols as f64;
    let mut entries = Vec::with_capacity(cols);
    let mut total = 0.0;
    for j in 0..cols {
        let (i, m) = argmin((0..rows).map(|i| cost.get(i, j)));
        total += m;
        entries.push(PlanEntry { i, j, mass });
    }
    let plan = TransportPlan::sparse(rows, cols, entries, PlanMethod::Rcmd2);
    let distance = Distance {
        value: total / cols as f64,
        method: PlanMethod::Rcmd2,
    };
    (plan, distance)
}

pub fn rcmd1(a: &TokenMatrix, b: &TokenMatrix) -> Result<(TransportPlan, Distance)> {
    Ok(rcmd1_from_cost(&cmd_cost(a, b)?))
}

pub fn rcmd2(a: &TokenMatrix, b: &TokenMatrix) -> Result<(TransportPlan, Distance)> {
    Ok(rcmd2_from_cost(&cmd_cost(a, b)?))
}

/// `½ (T1 + T2)`: at most `L1 + L2` nonzeros, objective `½ (d1 + d2)`.
pub fn rcmd_from_cost(cost: &DenseMatrix) -> (TransportPlan, Distance) {
    let (p1, d1) = rcmd1_from_cost(cost);
    let (p2, d2) = rcmd2_from_cost(cost);
    let entries = p1
        .entries()
        .chain(p2.entries())
        .map(|e| PlanEntry {
            mass: 0.5 * e.mass,
            ..e
        })
        .collect();
    let plan = TransportPlan::sparse(cost.rows(), cost.cols(), entries, PlanMethod::Rcmd);
    let distance = Distance {
        value: 0.5 * (d1.value + d2.value),
        method: PlanMethod::Rcmd,
    };
    (plan, distance)
}

/// Plan, the cost it is scored against, and the resulting distance.
#[derive(Debug, Clone)]
pub struct PairTransport {
    pub plan: TransportPlan,
    pub cost: DenseMatrix,
    pub distance: Distance,
}

impl PairTransport {
    /// Total plan mass; 1 for every method except AVG.
    pub fn mass(&self) -> f64 {
        self.plan.total_mass()
    }
}

/// Solve the pair with the given method. AVG is scored against its own
/// norm-adjusted cost, every other method against the cosine cost.
pub fn transport_pair(
    a: &TokenMatrix,
    b: &TokenMatrix,
    method: PlanMethod,
) -> Result<PairTransport> {
    if method == PlanMethod::Avg {
        let out = avg_decomposition(a, b)?;
        return Ok(PairTransport {
            plan: out.plan,
            cost: out.cost,
            distance: out.distance,
        });
    }
    let cost = cmd_cost(a, b)?;
    let (plan, distance) = match method {
        PlanMethod::Rcmd1 => rcmd1_from_cost(&cost),
        PlanMethod::Rcmd2 => rcmd2_from_cost(&cost),
        PlanMethod::Rcmd => rcmd_from_cost(&cost),
        _ => {
            let d1 = vec![1.0 / a.len() as f64; a.len()];
            let d2 = vec![1.0 / b.len() as f64; b.len()];
            let problem = TransportProblem::new(d1, d2, cost)?;
            let (plan, distance) = exact_emd(&problem)?;
            return Ok(PairTransport {
                plan,
                cost: problem.cost,
                distance,
            });
        }
    };
    Ok(PairTransport {
        plan,
        cost,
        distance,
    })
}
