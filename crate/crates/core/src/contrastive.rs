//! Contrastive objective over bidirectional RCMD similarities.
//!
//! For anchor `i` with candidates `c` (all in-batch positives, then the hard
//! negatives when supplied):
//!
//! ```text
//! loss_i = -S(i, i+)/τ + log Σ_c exp(S(i, c)/τ)
//! ```
//!
//! The batch loss is the mean over anchors. Gradients treat each max as a
//! max-pool: the selected partner is frozen for the backward pass.

use crate::embedding::TokenMatrix;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::similarity::{batch_similarity, SimilarityMethod, Storage};

/// Softmax temperature used for training unless overridden.
pub const DEFAULT_TAU: f64 = 0.05;

/// Row maxima closer than this are reported as ties.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub anchors: Vec<TokenMatrix>,
    pub positives: Vec<TokenMatrix>,
    pub hard_negatives: Option<Vec<TokenMatrix>>,
}

impl ContrastiveBatch {
    pub fn new(
        anchors: Vec<TokenMatrix>,
        positives: Vec<TokenMatrix>,
        hard_negatives: Option<Vec<TokenMatrix>>,
    ) -> Result<Self> {
        let b = anchors.len();
        if positives.len() != b || hard_negatives.as_ref().is_some_and(|n| n.len() != b) {
            return Err(Error::BatchShapeMismatch(
                "anchors, positives and hard negatives must have equal length".into(),
            ));
        }
        if b == 0 || (b == 1 && hard_negatives.is_none()) {
            return Err(Error::DegenerateBatch(format!(
                "batch of {b} without hard negatives has no negatives"
            )));
        }
        let dim = anchors[0].dim();
        if let Some(bad) = anchors
            .iter()
            .chain(&positives)
            .chain(hard_negatives.iter().flatten())
            .find(|m| m.dim() != dim)
        {
            return Err(Error::BatchShapeMismatch(format!(
                "sentence {} has dimension {}, batch uses {dim}",
                bad.id(),
                bad.dim()
            )));
        }
        Ok(Self {
            anchors,
            positives,
            hard_negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Positives followed by hard negatives.
    pub fn candidates(&self) -> impl Iterator<Item = &TokenMatrix> {
        self.positives
            .iter()
            .chain(self.hard_negatives.iter().flatten())
    }

    pub fn similarities(&self) -> Result<DenseMatrix> {
        Ok(batch_similarity(
            &self.anchors,
            &self.positives,
            self.hard_negatives.as_deref(),
            SimilarityMethod::Rcmd,
            Storage::Sparse,
        )?
        .values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total_loss: f64,
    pub per_example: Vec<f64>,
    pub temperature: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Per-anchor losses from a similarity matrix, with log-sum-exp
/// stabilization. Also returns the softmax over candidates.
fn loss_from_similarities(sims: &DenseMatrix, tau: f64) -> (LossReport, DenseMatrix) {
    let (b, c) = sims.shape();
    let mut per_example = Vec::with_capacity(b);
    let mut softmax = DenseMatrix::zeros(b, c);
    for i in 0..b {
        let logits: Vec<f64> = sims.row(i).iter().map(|s| s / tau).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        let lse = top + z.ln();
        per_example.push((lse - logits[i]).max(0.0));
        for (j, l) in logits.iter().enumerate() {
            softmax.set(i, j, (l - lse).exp());
        }
    }
    let total_loss = per_example.iter().sum::<f64>() / b as f64;
    (
        LossReport {
            total_loss,
            per_example,
            temperature: tau,
        },
        softmax,
    )
}

pub fn clrcmd_loss(batch: &ContrastiveBatch, tau: f64) -> Result<LossReport> {
    check_tau(tau)?;
    Ok(loss_from_similarities(&batch.similarities()?, tau).0)
}

/// Which side of a pair a tied maximum was found on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieSide {
    /// Anchor token whose best candidate token is tied.
    Anchor,
    /// Candidate token whose best anchor token is tied.
    Candidate,
}

/// A maximum attained twice within [`TIE_TOL`]; the gradient there is a
/// subgradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TieWarning {
    pub anchor: usize,
    pub candidate: usize,
    pub side: TieSide,
    pub token: usize,
}

/// Loss gradients with respect to every token embedding in the batch, in the
/// flat row-major layout of each [`TokenMatrix`].
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub report: LossReport,
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub hard_negatives: Option<Vec<Vec<f64>>>,
    pub ties: Vec<TieWarning>,
}

impl BatchGradients {
    pub fn norm(&self) -> f64 {
        self.anchors
            .iter()
            .chain(&self.positives)
            .chain(self.hard_negatives.iter().flatten())
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Adds `weight * d cos(x, y) / dx` into `out`.
fn add_cosine_grad(out: &mut [f64], x: &[f64], nx: f64, y: &[f64], ny: f64, weight: f64) {
    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
    let cos = dot / (nx * ny);
    let a = weight / (nx * ny);
    let b = weight * cos / (nx * nx);
    for ((o, xv), yv) in out.iter_mut().zip(x).zip(y) {
        *o += a * yv - b * xv;
    }
}

fn best_with_runner_up(values: impl Iterator<Item = f64>) -> (usize, f64, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    let mut second = f64::NEG_INFINITY;
    for (k, v) in values.enumerate() {
        if v > best.1 {
            second = best.1;
            best = (k, v);
        } else if v > second {
            second = v;
        }
    }
    (best.0, best.1, second)
}

/// Backprop of `weight * S_RCMD(a, c)` into `ga` and `gc`.
fn backprop_pair(
    a: &TokenMatrix,
    c: &TokenMatrix,
    weight: f64,
    ga: &mut [f64],
    gc: &mut [f64],
    mut on_tie: impl FnMut(TieSide, usize),
) {
    let (la, lc, d) = (a.len(), c.len(), a.dim());
    // Same values as the forward pass, so the selected maxima agree.
    let cos = crate::transport::cosine_matrix(a, c).expect("dimensions checked by the batch");
    let w1 = 0.5 * weight / la as f64;
    for i in 0..la {
        let (j, best, second) = best_with_runner_up(cos.row(i).iter().copied());
        if best - second <= TIE_TOL {
            on_tie(TieSide::Anchor, i);
        }
        add_cosine_grad(
            &mut ga[i * d..(i + 1) * d],
            a.row(i),
            a.norm(i),
            c.row(j),
            c.norm(j),
            w1,
        );
        add_cosine_grad(
            &mut gc[j * d..(j + 1) * d],
            c.row(j),
            c.norm(j),
            a.row(i),
            a.norm(i),
            w1,
        );
    }
    let w2 = 0.5 * weight / lc as f64;
    for j in 0..lc {
        let (i, best, second) = best_with_runner_up((0..la).map(|i| cos.get(i, j)));
        if best - second <= TIE_TOL {
            on_tie(TieSide::Candidate, j);
        }
        add_cosine_grad(
            &mut ga[i * d..(i + 1) * d],
            a.row(i),
            a.norm(i),
            c.row(j),
            c.norm(j),
            w2,
        );
        add_cosine_grad(
            &mut gc[j * d..(j + 1) * d],
            c.row(j),
            c.norm(j),
            a.row(i),
            a.norm(i),
            w2,
        );
    }
}

/// Loss and its gradient with respect to all token embeddings. Ties at a
/// maximum are reported in [`BatchGradients::ties`] and resolved toward the
/// smallest index.
pub fn clrcmd_grad(batch: &ContrastiveBatch, tau: f64) -> Result<BatchGradients> {
    check_tau(tau)?;
    let sims = batch.similarities()?;
    let (report, softmax) = loss_from_similarities(&sims, tau);
    let b = batch.len();
    let zeros = |ms: &[TokenMatrix]| -> Vec<Vec<f64>> {
        ms.iter().map(|m| vec![0.0; m.as_flat().len()]).collect()
    };
    let mut g_anchor = zeros(&batch.anchors);
    let mut g_cand = zeros(&batch.positives);
    if let Some(neg) = &batch.hard_negatives {
        g_cand.extend(zeros(neg));
    }
    let candidates: Vec<&TokenMatrix> = batch.candidates().collect();
    let mut ties = Vec::new();
    for (i, anchor) in batch.anchors.iter().enumerate() {
        for (j, cand) in candidates.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            let weight = (softmax.get(i, j) - target) / (tau * b as f64);
            backprop_pair(
                anchor,
                cand,
                weight,
                &mut g_anchor[i],
                &mut g_cand[j],
                |side, token| {
                    ties.push(TieWarning {
                        anchor: i,
                        candidate: j,
                        side,
                        token,
                    })
                },
            );
        }
    }
    let hard_negatives = batch.hard_negatives.as_ref().map(|_| g_cand.split_off(b));
    Ok(BatchGradients {
        report,
        anchors: g_anchor,
        positives: g_cand,
        hard_negatives,
        ties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> TokenMatrix {
        let rows = (0..len)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        TokenMatrix::from_rows("r", rows).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, negatives: bool) -> ContrastiveBatch {
        let mk = |rng: &mut ChaCha8Rng| -> Vec<TokenMatrix> {
            (0..b)
                .map(|_| {
                    let l = rng.gen_range(1..5);
                    random_matrix(rng, l, 4)
                })
                .collect()
        };
        let a = mk(rng);
        let p = mk(rng);
        let n = negatives.then(|| mk(rng));
        ContrastiveBatch::new(a, p, n).unwrap()
    }

    #[test]
    fn identical_sentences_give_uniform_softmax() {
        let s = TokenMatrix::from_rows("s", vec![vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let batch = ContrastiveBatch::new(vec![s.clone(); 2], vec![s.clone(); 2], None).unwrap();
        let r = clrcmd_loss(&batch, DEFAULT_TAU).unwrap();
        for l in &r.per_example {
            assert!((l - 2f64.ln()).abs() <= 1e-12);
        }
        let batch = ContrastiveBatch::new(vec![s.clone(); 2], vec![s.clone(); 2], Some(vec![s; 2]))
            .unwrap();
        let r = clrcmd_loss(&batch, DEFAULT_TAU).unwrap();
        for l in &r.per_example {
            assert!((l - 4f64.ln()).abs() <= 1e-12);
        }
    }

    #[test]
    fn matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = random_batch(&mut rng, 3, true);
        let tau = 0.5;
        let r = clrcmd_loss(&batch, tau).unwrap();
        let cands: Vec<&TokenMatrix> = batch.candidates().collect();
        let mut total = 0.0;
        for i in 0..3 {
            let s = |c: &TokenMatrix| {
                crate::similarity::sim_rcmd(&batch.anchors[i], c)
                    .unwrap()
                    .value
            };
            let num = (s(&batch.positives[i]) / tau).exp();
            let den: f64 = cands.iter().map(|c| (s(c) / tau).exp()).sum();
            let l = -(num / den).ln();
            assert!((r.per_example[i] - l).abs() <= 1e-9);
            total += l;
        }
        assert!((r.total_loss - total / 3.0).abs() <= 1e-9);
    }

    #[test]
    fn degenerate_batches() {
        let s = TokenMatrix::from_rows("s", vec![vec![1.0]]).unwrap();
        assert!(matches!(
            ContrastiveBatch::new(vec![s.clone()], vec![s.clone()], None),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(ContrastiveBatch::new(vec![s.clone()], vec![s.clone()], Some(vec![s])).is_ok());
    }

    #[test]
    fn bad_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 2, false);
        assert!(clrcmd_loss(&batch, 0.0).is_err());
        assert!(clrcmd_grad(&batch, -1.0).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let tau = 0.05;
        let batch = random_batch(&mut rng, 3, true);
        let grads = clrcmd_grad(&batch, tau).unwrap();
        assert!(grads.ties.is_empty());
        let h = 1e-5;
        let loss_with = |which: usize, k: usize, delta: f64| {
            let mut b = batch.clone();
            let m = &mut b.anchors[which];
            let mut data = m.as_flat().to_vec();
            data[k] += delta;
            *m = m.with_data(data).unwrap();
            clrcmd_loss(&b, tau).unwrap().total_loss
        };
        for which in 0..3 {
            for k in 0..batch.anchors[which].as_flat().len() {
                let fd = (loss_with(which, k, h) - loss_with(which, k, -h)) / (2.0 * h);
                let g = grads.anchors[which][k];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
                assert!(rel <= 1e-4, "anchor {which}[{k}]: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn tie_is_reported() {
        let a = TokenMatrix::from_rows("a", vec![vec![1.0, 0.0]]).unwrap();
        let c = TokenMatrix::from_rows("c", vec![vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let batch = ContrastiveBatch::new(vec![a.clone(), a], vec![c.clone(), c], None).unwrap();
        let g = clrcmd_grad(&batch, DEFAULT_TAU).unwrap();
        assert!(g.ties.iter().any(|t| t.side == TieSide::Anchor));
    }
}
