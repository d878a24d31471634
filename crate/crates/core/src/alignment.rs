//! From transport plans to chunk alignments.
//!
//! Token-pair contributions `(1 - M) ∘ T` are averaged over gold chunk
//! blocks, and a chunk pair is aligned when each chunk is the other's best
//! partner.

use std::collections::BTreeSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::embedding::TokenMatrix;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::transport::{check_shape, transport_pair, PairTransport, PlanMethod, TransportPlan};

/// Per-token-pair contributions `(1 - M_ij) T_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMatrix(pub DenseMatrix);

impl ContributionMatrix {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.sum()
    }
}

pub fn token_contributions(plan: &TransportPlan, cost: &DenseMatrix) -> Result<ContributionMatrix> {
    check_shape(plan.shape(), cost.shape())?;
    let mut out = DenseMatrix::zeros(plan.rows(), plan.cols());
    for e in plan.entries() {
        if e.mass != 0.0 {
            out.set(e.i, e.j, (1.0 - cost.get(e.i, e.j)) * e.mass);
        }
    }
    Ok(ContributionMatrix(out))
}

/// Partition of a sentence's token indices into nonempty, disjoint chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkMap {
    chunks: Vec<Vec<usize>>,
    len: usize,
}

impl ChunkMap {
    /// `len` is the sentence length the chunks index into.
    pub fn new(chunks: Vec<Vec<usize>>, len: usize) -> Result<Self> {
        let mut seen = vec![false; len];
        for (c, chunk) in chunks.iter().enumerate() {
            if chunk.is_empty() {
                return Err(Error::IndexOutOfRange(format!("chunk {c} is empty")));
            }
            for &t in chunk {
                if t >= len {
                    return Err(Error::IndexOutOfRange(format!(
                        "chunk {c} references token {t} of a {len}-token sentence"
                    )));
                }
                if std::mem::replace(&mut seen[t], true) {
                    return Err(Error::IndexOutOfRange(format!(
                        "token {t} belongs to two chunks"
                    )));
                }
            }
        }
        Ok(Self { chunks, len })
    }

    /// Half-open `[start, end)` token spans.
    pub fn from_spans(spans: &[(usize, usize)], len: usize) -> Result<Self> {
        let chunks = spans.iter().map(|&(s, e)| (s..e).collect()).collect();
        Self::new(chunks, len)
    }

    /// One chunk per token.
    pub fn singletons(len: usize) -> Self {
        Self {
            chunks: (0..len).map(|t| vec![t]).collect(),
            len,
        }
    }

    pub fn chunks(&self) -> &[Vec<usize>] {
        &self.chunks
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn sentence_len(&self) -> usize {
        self.len
    }
}

/// Which per-token quantity is averaged into chunk scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContribVariant {
    /// `(1 - M) ∘ T`: high means aligned.
    #[default]
    OneMinusM,
    /// `T ∘ M`: the transported cost itself.
    M,
}

/// `C[i][j] = mean over (k, l) in chunk1(i) × chunk2(j) of q(k, l)`.
pub fn chunk_scores(
    plan: &TransportPlan,
    cost: &DenseMatrix,
    cmap1: &ChunkMap,
    cmap2: &ChunkMap,
    variant: ContribVariant,
) -> Result<DenseMatrix> {
    check_shape(plan.shape(), cost.shape())?;
    for (map, len, side) in [(cmap1, plan.rows(), 1), (cmap2, plan.cols(), 2)] {
        if map.sentence_len() != len {
            return Err(Error::IndexOutOfRange(format!(
                "chunk map {side} covers {} tokens, plan has {len}",
                map.sentence_len()
            )));
        }
    }
    let quantity = match variant {
        ContribVariant::OneMinusM => token_contributions(plan, cost)?.0,
        ContribVariant::M => DenseMatrix::from_fn(plan.rows(), plan.cols(), |i, j| {
            plan.get(i, j) * cost.get(i, j)
        }),
    };
    Ok(DenseMatrix::from_fn(
        cmap1.num_chunks(),
        cmap2.num_chunks(),
        |ci, cj| {
            let rows = &cmap1.chunks()[ci];
            let cols = &cmap2.chunks()[cj];
            let total: f64 = rows
                .iter()
                .flat_map(|&k| cols.iter().map(move |&l| (k, l)))
                .map(|(k, l)| quantity.get(k, l))
                .sum();
            total / (rows.len() * cols.len()) as f64
        },
    ))
}

/// Aligned chunk pairs with the chunk score that selected them.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ChunkAlignment {
    pub pairs: Vec<AlignedPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignedPair {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

impl ChunkAlignment {
    /// Gold alignment without confidences.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let set: BTreeSet<(usize, usize)> = pairs.into_iter().collect();
        Self {
            pairs: set
                .into_iter()
                .map(|(i, j)| AlignedPair {
                    i,
                    j,
                    confidence: 1.0,
                })
                .collect(),
        }
    }

    pub fn pair_set(&self) -> BTreeSet<(usize, usize)> {
        self.pairs.iter().map(|p| (p.i, p.j)).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Mutual-argmax pairs of `c`, smallest index winning ties in both directions.
pub fn extract_alignment(c: &DenseMatrix) -> ChunkAlignment {
    let (rows, cols) = c.shape();
    let col_best: Vec<usize> = (0..cols)
        .map(|j| first_argmax((0..rows).map(|i| c.get(i, j))))
        .collect();
    let pairs = (0..rows)
        .filter_map(|i| {
            if cols == 0 {
                return None;
            }
            let j = first_argmax(c.row(i).iter().copied());
            (col_best[j] == i).then(|| AlignedPair {
                i,
                j,
                confidence: c.get(i, j),
            })
        })
        .collect();
    ChunkAlignment { pairs }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Score {
    /// From raw counts; an empty prediction (gold) set has precision
    /// (recall) 1 when the other set is also empty, else 0.
    pub fn from_counts(hits: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |den: usize, other: usize| {
            if den == 0 {
                if other == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                hits as f64 / den as f64
            }
        };
        let precision = ratio(predicted, gold);
        let recall = ratio(gold, predicted);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

pub fn alignment_f1(pred: &ChunkAlignment, gold: &ChunkAlignment) -> F1Score {
    let p = pred.pair_set();
    let g = gold.pair_set();
    F1Score::from_counts(p.intersection(&g).count(), p.len(), g.len())
}

/// Running totals for micro-averaged F1 over many sentence pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct F1Counts {
    pub hits: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl F1Counts {
    pub fn add(&mut self, pred: &ChunkAlignment, gold: &ChunkAlignment) {
        let p = pred.pair_set();
        let g = gold.pair_set();
        self.hits += p.intersection(&g).count();
        self.predicted += p.len();
        self.gold += g.len();
    }

    pub fn score(&self) -> F1Score {
        F1Score::from_counts(self.hits, self.predicted, self.gold)
    }
}

/// Everything produced by aligning one sentence pair.
#[derive(Debug, Clone)]
pub struct PairAlignment {
    pub transport: PairTransport,
    pub contributions: ContributionMatrix,
    pub chunk_scores: DenseMatrix,
    pub alignment: ChunkAlignment,
}

pub fn align_pair(
    a: &TokenMatrix,
    b: &TokenMatrix,
    method: PlanMethod,
    cmap1: &ChunkMap,
    cmap2: &ChunkMap,
    variant: ContribVariant,
) -> Result<PairAlignment> {
    let transport = transport_pair(a, b, method)?;
    let contributions = token_contributions(&transport.plan, &transport.cost)?;
    let scores = chunk_scores(&transport.plan, &transport.cost, cmap1, cmap2, variant)?;
    let alignment = extract_alignment(&scores);
    Ok(PairAlignment {
        transport,
        contributions,
        chunk_scores: scores,
        alignment,
    })
}

/// One line of a chunk file. Spans are half-open token intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub id: String,
    pub chunks1: Vec<(usize, usize)>,
    pub chunks2: Vec<(usize, usize)>,
    /// Absent when the pair has no reference alignment.
    #[serde(default)]
    pub gold: Option<Vec<(usize, usize)>>,
}

impl ChunkRecord {
    pub fn maps(&self, len1: usize, len2: usize) -> Result<(ChunkMap, ChunkMap)> {
        Ok((
            ChunkMap::from_spans(&self.chunks1, len1)?,
            ChunkMap::from_spans(&self.chunks2, len2)?,
        ))
    }

    pub fn gold_alignment(&self) -> Option<ChunkAlignment> {
        self.gold
            .as_ref()
            .map(|g| ChunkAlignment::from_pairs(g.iter().copied()))
    }
}

pub fn read_chunk_records<R: BufRead>(reader: R) -> Result<Vec<ChunkRecord>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
