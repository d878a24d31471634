//! Sentence similarities derived from the transport distances, and batch
//! similarity matrices for contrastive training.
//!
//! The RCMD similarities only ever need each token's best partner, so a
//! pair can be scored while retaining at most `L1 + L2` cost entries instead
//! of the full `L1 * L2` cost matrix. [`Storage::Sparse`] does exactly that
//! and counts what it keeps.

use serde::Serialize;

use crate::embedding::{avg_pool, TokenMatrix};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::transport::{self, cmd_cost, DEGENERATE_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SimilarityMethod {
    Avg,
    Rcmd1,
    Rcmd2,
    Rcmd,
}

impl SimilarityMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityMethod::Avg => "AVG",
            SimilarityMethod::Rcmd1 => "RCMD1",
            SimilarityMethod::Rcmd2 => "RCMD2",
            SimilarityMethod::Rcmd => "RCMD",
        }
    }

    pub fn is_rcmd(self) -> bool {
        !matches!(self, SimilarityMethod::Avg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Storage {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityScore {
    pub value: f64,
    pub method: SimilarityMethod,
}

/// `1 - d_RCMD1 = (1/L1) Σ_i max_j cos(a_i, b_j)`.
pub fn sim_rcmd1(a: &TokenMatrix, b: &TokenMatrix) -> Result<SimilarityScore> {
    let (_, d) = transport::rcmd1(a, b)?;
    Ok(SimilarityScore {
        value: 1.0 - d.value,
        method: SimilarityMethod::Rcmd1,
    })
}

/// `1 - d_RCMD2 = (1/L2) Σ_j max_i cos(a_i, b_j)`.
pub fn sim_rcmd2(a: &TokenMatrix, b: &TokenMatrix) -> Result<SimilarityScore> {
    let (_, d) = transport::rcmd2(a, b)?;
    Ok(SimilarityScore {
        value: 1.0 - d.value,
        method: SimilarityMethod::Rcmd2,
    })
}

/// Mean of the two directional similarities; symmetric in its arguments.
pub fn sim_rcmd(a: &TokenMatrix, b: &TokenMatrix) -> Result<SimilarityScore> {
    let cost = cmd_cost(a, b)?;
    Ok(SimilarityScore {
        value: rcmd_from_dense(&cost, SimilarityMethod::Rcmd),
        method: SimilarityMethod::Rcmd,
    })
}

/// Cosine of the average-pooled embeddings.
pub fn sim_avg(a: &TokenMatrix, b: &TokenMatrix) -> Result<SimilarityScore> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let s1 = avg_pool(a);
    let s2 = avg_pool(b);
    let (n1, n2) = (s1.norm(), s2.norm());
    for norm in [n1, n2] {
        if norm < DEGENERATE_NORM {
            return Err(Error::DegeneratePooledEmbedding { norm });
        }
    }
    let dot: f64 = s1.vector.iter().zip(&s2.vector).map(|(x, y)| x * y).sum();
    Ok(SimilarityScore {
        value: (dot / (n1 * n2)).clamp(-1.0, 1.0),
        method: SimilarityMethod::Avg,
    })
}

pub fn similarity(
    a: &TokenMatrix,
    b: &TokenMatrix,
    method: SimilarityMethod,
) -> Result<SimilarityScore> {
    match method {
        SimilarityMethod::Avg => sim_avg(a, b),
        SimilarityMethod::Rcmd1 => sim_rcmd1(a, b),
        SimilarityMethod::Rcmd2 => sim_rcmd2(a, b),
        SimilarityMethod::Rcmd => sim_rcmd(a, b),
    }
}

fn rcmd_from_dense(cost: &DenseMatrix, method: SimilarityMethod) -> f64 {
    let s1 = || 1.0 - transport::rcmd1_from_cost(cost).1.value;
    let s2 = || 1.0 - transport::rcmd2_from_cost(cost).1.value;
    match method {
        SimilarityMethod::Rcmd1 => s1(),
        SimilarityMethod::Rcmd2 => s2(),
        _ => 0.5 * (s1() + s2()),
    }
}

/// Cost entry retained by the sparse path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEntry {
    pub i: usize,
    pub j: usize,
    pub cost: f64,
}

/// The union of the two relaxed plans' supports for one pair, with their
/// costs. Holds at most `L1 + L2` entries.
#[derive(Debug, Clone)]
pub struct SparseRcmd {
    rows: usize,
    cols: usize,
    /// Sorted row-major, no duplicates.
    entries: Vec<CostEntry>,
    row_best: Vec<(usize, f64)>,
    col_best: Vec<(usize, f64)>,
}

impl SparseRcmd {
    /// Streams over all token pairs keeping only per-row and per-column
    /// minima; the full cost matrix is never materialized.
    pub fn build(a: &TokenMatrix, b: &TokenMatrix) -> Result<Self> {
        if a.dim() != b.dim() {
            return Err(Error::DimensionMismatch {
                expected: a.dim(),
                got: b.dim(),
            });
        }
        let (rows, cols) = (a.len(), b.len());
        let mut row_best = vec![(0, f64::INFINITY); rows];
        let mut col_best = vec![(0, f64::INFINITY); cols];
        transport::for_each_cosine(a, b, |i, j, c| {
            let m = 1.0 - c;
            if m < row_best[i].1 {
                row_best[i] = (j, m);
            }
            if m < col_best[j].1 {
                col_best[j] = (i, m);
            }
        });
        let mut entries: Vec<CostEntry> = row_best
            .iter()
            .enumerate()
            .map(|(i, &(j, cost))| CostEntry { i, j, cost })
            .chain(
                col_best
                    .iter()
                    .enumerate()
                    .map(|(j, &(i, cost))| CostEntry { i, j, cost }),
            )
            .collect();
        entries.sort_by_key(|e| (e.i, e.j));
        entries.dedup_by_key(|e| (e.i, e.j));
        Ok(Self {
            rows,
            cols,
            entries,
            row_best,
            col_best,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn entries(&self) -> &[CostEntry] {
        &self.entries
    }

    pub fn stored_entries(&self) -> usize {
        self.entries.len()
    }

    /// `1 - (1/L1) Σ_i min_j M_ij`, summed in row order like the dense path.
    pub fn sim_rcmd1(&self) -> f64 {
        let total: f64 = self.row_best.iter().map(|b| b.1).sum();
        1.0 - total / self.rows as f64
    }

    pub fn sim_rcmd2(&self) -> f64 {
        let total: f64 = self.col_best.iter().map(|b| b.1).sum();
        1.0 - total / self.cols as f64
    }

    pub fn score(&self, method: SimilarityMethod) -> f64 {
        match method {
            SimilarityMethod::Rcmd1 => self.sim_rcmd1(),
            SimilarityMethod::Rcmd2 => self.sim_rcmd2(),
            _ => 0.5 * (self.sim_rcmd1() + self.sim_rcmd2()),
        }
    }
}

/// Anchors × candidates similarity matrix. Candidates are the positives,
/// followed by the hard negatives when present.
#[derive(Debug, Clone)]
pub struct BatchSimilarityMatrix {
    pub values: DenseMatrix,
    pub method: SimilarityMethod,
    pub storage: Storage,
    /// Cost entries actually retained across all pairs.
    pub stored_entries: usize,
    /// `Σ L1 * L2` over all pairs, the size of the full cost matrices.
    pub dense_entries: usize,
}

impl BatchSimilarityMatrix {
    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }

    pub fn has_hard_negatives(&self) -> bool {
        self.values.cols() == 2 * self.values.rows()
    }

    /// `stored / dense`; 0 when nothing is stored.
    pub fn storage_ratio(&self) -> f64 {
        if self.dense_entries == 0 {
            0.0
        } else {
            self.stored_entries as f64 / self.dense_entries as f64
        }
    }
}

/// Score one pair under the requested storage, returning the score and
/// the number of cost entries retained.
pub fn pair_similarity(
    a: &TokenMatrix,
    b: &TokenMatrix,
    method: SimilarityMethod,
    storage: Storage,
) -> Result<(f64, usize)> {
    if !method.is_rcmd() {
        return Ok((sim_avg(a, b)?.value, 0));
    }
    match storage {
        Storage::Dense => {
            let cost = cmd_cost(a, b)?;
            Ok((rcmd_from_dense(&cost, method), a.len() * b.len()))
        }
        Storage::Sparse => {
            let sparse = SparseRcmd::build(a, b)?;
            let kept = match method {
                SimilarityMethod::Rcmd1 => a.len(),
                SimilarityMethod::Rcmd2 => b.len(),
                _ => sparse.stored_entries(),
            };
            Ok((sparse.score(method), kept))
        }
    }
}

pub fn batch_similarity(
    anchors: &[TokenMatrix],
    positives: &[TokenMatrix],
    hard_negatives: Option<&[TokenMatrix]>,
    method: SimilarityMethod,
    storage: Storage,
) -> Result<BatchSimilarityMatrix> {
    let b = anchors.len();
    if b == 0 {
        return Err(Error::BatchShapeMismatch("empty batch".into()));
    }
    if positives.len() != b {
        return Err(Error::BatchShapeMismatch(format!(
            "{b} anchors but {} positives",
            positives.len()
        )));
    }
    if let Some(neg) = hard_negatives {
        if neg.len() != b {
            return Err(Error::BatchShapeMismatch(format!(
                "{b} anchors but {} hard negatives",
                neg.len()
            )));
        }
    }
    let candidates: Vec<&TokenMatrix> = positives
        .iter()
        .chain(hard_negatives.unwrap_or(&[]))
        .collect();
    let dim = anchors[0].dim();
    if let Some(bad) = anchors
        .iter()
        .chain(candidates.iter().copied())
        .find(|m| m.dim() != dim)
    {
        return Err(Error::BatchShapeMismatch(format!(
            "sentence {} has dimension {}, batch uses {dim}",
            bad.id(),
            bad.dim()
        )));
    }
    let mut values = DenseMatrix::zeros(b, candidates.len());
    let mut stored = 0;
    let mut dense = 0;
    for (i, a) in anchors.iter().enumerate() {
        for (j, c) in candidates.iter().enumerate() {
            let (v, kept) = pair_similarity(a, c, method, storage)?;
            values.set(i, j, v);
            stored += kept;
            if method.is_rcmd() {
                dense += a.len() * c.len();
            }
        }
    }
    Ok(BatchSimilarityMatrix {
        values,
        method,
        storage,
        stored_entries: stored,
        dense_entries: dense,
    })
}
