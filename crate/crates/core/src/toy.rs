//! Desk-scale stand-in for encoder finetuning.
//!
//! A vocabulary is split into synonym groups. Positives are built by
//! replacing every anchor token with a synonym and shuffling, so the
//! substitution map is a planted gold alignment. The encoder is a trainable
//! embedding table whose outputs are mixed with the sentence mean, which
//! makes token vectors depend on their context.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::alignment::{align_pair, ChunkAlignment, ChunkMap, ContribVariant, F1Counts};
use crate::contrastive::{clrcmd_grad, clrcmd_loss, ContrastiveBatch, DEFAULT_TAU};
use crate::embedding::{EmbeddingCorpus, TokenMatrix};
use crate::error::{Error, Result};
use crate::similarity::sim_rcmd;
use crate::transport::PlanMethod;

/// Vocabulary partitioned into equally sized synonym groups.
#[derive(Debug, Clone)]
pub struct SynonymCorpus {
    vocab: Vec<String>,
    groups: Vec<Vec<usize>>,
    sentence_len: usize,
}

/// Anchor, positive and hard negative as token-id sequences. `alignment`
/// maps anchor positions to positive positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub anchor: Vec<usize>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub alignment: Vec<(usize, usize)>,
}

impl SynonymCorpus {
    pub fn new(vocab_size: usize, group_size: usize, sentence_len: usize) -> Result<Self> {
        if group_size < 2 || !vocab_size.is_multiple_of(group_size) {
            return Err(Error::InvalidArgument(format!(
                "vocabulary of {vocab_size} cannot be split into synonym groups of {group_size}"
            )));
        }
        let n_groups = vocab_size / group_size;
        if sentence_len == 0 || 2 * sentence_len > n_groups {
            return Err(Error::InvalidArgument(format!(
                "{n_groups} groups cannot supply disjoint sentences of length {sentence_len}"
            )));
        }
        let groups: Vec<Vec<usize>> = (0..n_groups)
            .map(|g| (g * group_size..(g + 1) * group_size).collect())
            .collect();
        let vocab = (0..vocab_size)
            .map(|t| format!("w{}_{}", t / group_size, t % group_size))
            .collect();
        Ok(Self {
            vocab,
            groups,
            sentence_len,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_of(&self, token: usize) -> usize {
        token / self.groups[0].len()
    }

    pub fn sentence_len(&self) -> usize {
        self.sentence_len
    }

    fn synonym<R: Rng>(&self, token: usize, rng: &mut R) -> usize {
        let group = &self.groups[self.group_of(token)];
        loop {
            let s = *group.choose(rng).expect("groups are nonempty");
            if s != token {
                return s;
            }
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Triple {
        let n = self.sentence_len;
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(rng);
        let pick =
            |g: usize, rng: &mut R| *self.groups[g].choose(rng).expect("groups are nonempty");
        let anchor: Vec<usize> = order[..n].iter().map(|&g| pick(g, rng)).collect();
        let negative: Vec<usize> = order[n..2 * n].iter().map(|&g| pick(g, rng)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        // anchor position k lands at positive position perm[k]
        let mut positive = vec![0; n];
        for (k, &t) in anchor.iter().enumerate() {
            positive[perm[k]] = self.synonym(t, rng);
        }
        let alignment = (0..n).map(|k| (k, perm[k])).collect();
        Triple {
            anchor,
            positive,
            negative,
            alignment,
        }
    }
}

/// Embedding table plus a fixed context mixer:
/// `h_k = (1 - λ) e[t_k] + λ mean_l e[t_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocab: Vec<String>,
    table: Vec<f64>,
    dim: usize,
    lambda: f64,
}

impl ToyModel {
    pub const DEFAULT_LAMBDA: f64 = 0.5;
    const CHECKPOINT_ID: &'static str = "toy_model";

    pub fn from_table(
        vocab: Vec<String>,
        table: Vec<f64>,
        dim: usize,
        lambda: f64,
    ) -> Result<Self> {
        if dim == 0 || table.len() != vocab.len() * dim {
            return Err(Error::InvalidArgument(format!(
                "table of {} values does not fit {} types of dimension {dim}",
                table.len(),
                vocab.len()
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!(
                "mixer {lambda} outside [0, 1]"
            )));
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "embedding table has non-finite entries".into(),
            ));
        }
        Ok(Self {
            vocab,
            table,
            dim,
            lambda,
        })
    }

    /// Independent `N(0, std²)` entries.
    pub fn random(
        vocab: Vec<String>,
        dim: usize,
        lambda: f64,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let table = (0..vocab.len() * dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self::from_table(vocab, table, dim, lambda)
    }

    /// Synonyms share a random group direction, perturbed by `noise`-scaled
    /// Gaussian offsets.
    pub fn planted(
        corpus: &SynonymCorpus,
        dim: usize,
        lambda: f64,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let centers: Vec<Vec<f64>> = corpus
            .groups()
            .iter()
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mut table = Vec::with_capacity(corpus.vocab().len() * dim);
        for t in 0..corpus.vocab().len() {
            let c = &centers[corpus.group_of(t)];
            table.extend(c.iter().map(|v| v + noise * normal.sample(&mut rng)));
        }
        Self::from_table(corpus.vocab().to_vec(), table, dim, lambda)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.table[t * self.dim..(t + 1) * self.dim]
    }

    pub fn encode(&self, id: impl Into<String>, tokens: &[usize]) -> Result<TokenMatrix> {
        let d = self.dim;
        let len = tokens.len() as f64;
        let mut mean = vec![0.0; d];
        for &t in tokens {
            for (m, v) in mean.iter_mut().zip(self.row(t)) {
                *m += v / len;
            }
        }
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            data.extend(
                self.row(t)
                    .iter()
                    .zip(&mean)
                    .map(|(e, m)| (1.0 - self.lambda) * e + self.lambda * m),
            );
        }
        let names = tokens.iter().map(|&t| self.vocab[t].clone()).collect();
        TokenMatrix::from_flat(id, names, data, d)
    }

    /// Chain rule through the mixer: accumulate `dL/dh` into `dL/dtable`.
    fn backprop(&self, tokens: &[usize], grad_h: &[f64], grad_table: &mut [f64]) {
        let d = self.dim;
        let len = tokens.len() as f64;
        let mut total = vec![0.0; d];
        for g in grad_h.chunks_exact(d) {
            for (acc, v) in total.iter_mut().zip(g) {
                *acc += v;
            }
        }
        for (k, &t) in tokens.iter().enumerate() {
            let g = &grad_h[k * d..(k + 1) * d];
            let out = &mut grad_table[t * d..(t + 1) * d];
            for ((o, gk), s) in out.iter_mut().zip(g).zip(&total) {
                *o += (1.0 - self.lambda) * gk + self.lambda * s / len;
            }
        }
    }

    /// Table as a one-sentence corpus whose tokens are the vocabulary.
    pub fn to_corpus(&self) -> Result<EmbeddingCorpus> {
        let m = TokenMatrix::from_flat(
            format!("{};lambda={}", Self::CHECKPOINT_ID, self.lambda),
            self.vocab.clone(),
            self.table.clone(),
            self.dim,
        )?;
        EmbeddingCorpus::from_matrices([m])
    }

    pub fn from_corpus(corpus: &EmbeddingCorpus) -> Result<Self> {
        let m = corpus
            .iter()
            .next()
            .ok_or_else(|| Error::InvalidArgument("checkpoint corpus is empty".into()))?;
        let lambda = m
            .id()
            .split_once(";lambda=")
            .and_then(|(_, l)| l.parse().ok())
            .unwrap_or(Self::DEFAULT_LAMBDA);
        Self::from_table(m.tokens().to_vec(), m.as_flat().to_vec(), m.dim(), lambda)
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub seed: u64,
    pub vocab_size: usize,
    pub group_size: usize,
    pub sentence_len: usize,
    pub dim: usize,
    pub lambda: f64,
    /// Standard deviation of the initial embedding table.
    pub init_std: f64,
    /// Planted-alignment pairs used for evaluation.
    pub validation_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            lr: 5e-5,
            tau: DEFAULT_TAU,
            seed: 0,
            vocab_size: 50,
            group_size: 2,
            sentence_len: 5,
            dim: 16,
            lambda: ToyModel::DEFAULT_LAMBDA,
            init_std: 0.01,
            validation_pairs: 64,
        }
    }
}

impl TrainConfig {
    pub fn corpus(&self) -> Result<SynonymCorpus> {
        SynonymCorpus::new(self.vocab_size, self.group_size, self.sentence_len)
    }

    /// Fresh model drawn from the configured seed.
    pub fn init_model(&self, corpus: &SynonymCorpus) -> Result<ToyModel> {
        ToyModel::random(
            corpus.vocab().to_vec(),
            self.dim,
            self.lambda,
            self.init_std,
            self.seed,
        )
    }
}

/// Model quality on the held-out planted-alignment set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    /// Contrastive loss of the held-out set treated as one batch.
    pub loss: f64,
    pub mean_pos_sim: f64,
    /// Micro-averaged F1 of extracted token alignments against the planted map.
    pub alignment_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub mean_pos_sim: f64,
    pub alignment_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub initial: Evaluation,
    pub last: Evaluation,
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `step,loss,mean_pos_sim,alignment_acc` with a header line.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "step,loss,mean_pos_sim,alignment_acc")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                r.step, r.loss, r.mean_pos_sim, r.alignment_acc
            )?;
        }
        Ok(())
    }
}

/// Held-out triples used by [`evaluate`].
pub fn validation_set(corpus: &SynonymCorpus, n: usize, seed: u64) -> Vec<Triple> {
    // Separate stream from the training batches.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n).map(|_| corpus.sample(&mut rng)).collect()
}

fn encode_batch(model: &ToyModel, triples: &[Triple]) -> Result<ContrastiveBatch> {
    let mut anchors = Vec::with_capacity(triples.len());
    let mut positives = Vec::with_capacity(triples.len());
    let mut negatives = Vec::with_capacity(triples.len());
    for (k, t) in triples.iter().enumerate() {
        anchors.push(model.encode(format!("a{k}"), &t.anchor)?);
        positives.push(model.encode(format!("p{k}"), &t.positive)?);
        negatives.push(model.encode(format!("n{k}"), &t.negative)?);
    }
    ContrastiveBatch::new(anchors, positives, Some(negatives))
}

/// Loss, mean positive similarity and planted-alignment F1 on `triples`.
pub fn evaluate(model: &ToyModel, triples: &[Triple], tau: f64) -> Result<Evaluation> {
    let batch = encode_batch(model, triples)?;
    let loss = clrcmd_loss(&batch, tau)?.total_loss;
    let mut sim_total = 0.0;
    let mut counts = F1Counts::default();
    for ((a, p), t) in batch.anchors.iter().zip(&batch.positives).zip(triples) {
        sim_total += sim_rcmd(a, p)?.value;
        let aligned = align_pair(
            a,
            p,
            PlanMethod::Rcmd,
            &ChunkMap::singletons(a.len()),
            &ChunkMap::singletons(p.len()),
            ContribVariant::OneMinusM,
        )?;
        counts.add(
            &aligned.alignment,
            &ChunkAlignment::from_pairs(t.alignment.iter().copied()),
        );
    }
    Ok(Evaluation {
        loss,
        mean_pos_sim: sim_total / triples.len() as f64,
        alignment_acc: counts.score().f1,
    })
}

/// Contrastive training of the toy encoder. Deterministic for a fixed
/// config; `steps == 0` leaves the model untouched.
pub fn train_toy(
    model: &mut ToyModel,
    corpus: &SynonymCorpus,
    config: &TrainConfig,
) -> Result<TrainTrace> {
    if config.batch_size < 2 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 2".into(),
        ));
    }
    let validation = validation_set(corpus, config.validation_pairs.max(2), config.seed);
    let initial = evaluate(model, &validation, config.tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.table.len(), config.lr);
    let mut rows = Vec::with_capacity(config.steps);
    let mut last = initial;
    for step in 1..=config.steps {
        let triples: Vec<Triple> = (0..config.batch_size)
            .map(|_| corpus.sample(&mut rng))
            .collect();
        let batch = encode_batch(model, &triples)?;
        let grads = clrcmd_grad(&batch, config.tau)?;
        if !grads.report.total_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grad_table = vec![0.0; model.table.len()];
        let neg = grads
            .hard_negatives
            .as_ref()
            .expect("toy batches carry hard negatives");
        for (k, t) in triples.iter().enumerate() {
            model.backprop(&t.anchor, &grads.anchors[k], &mut grad_table);
            model.backprop(&t.positive, &grads.positives[k], &mut grad_table);
            model.backprop(&t.negative, &neg[k], &mut grad_table);
        }
        adam.step(&mut model.table, &grad_table);
        last = evaluate(model, &validation, config.tau)?;
        rows.push(TraceRow {
            step,
            loss: grads.report.total_loss,
            mean_pos_sim: last.mean_pos_sim,
            alignment_acc: last.alignment_acc,
        });
    }
    Ok(TrainTrace {
        initial,
        last,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_triples_are_consistent() {
        let corpus = SynonymCorpus::new(50, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let t = corpus.sample(&mut rng);
            for &(k, l) in &t.alignment {
                assert_eq!(corpus.group_of(t.anchor[k]), corpus.group_of(t.positive[l]));
                assert_ne!(t.anchor[k], t.positive[l]);
            }
            for n in &t.negative {
                assert!(t
                    .anchor
                    .iter()
                    .all(|a| corpus.group_of(*a) != corpus.group_of(*n)));
            }
        }
    }

    #[test]
    fn corpus_rejects_bad_shapes() {
        assert!(SynonymCorpus::new(50, 3, 5).is_err());
        assert!(SynonymCorpus::new(10, 2, 3).is_err());
    }

    #[test]
    fn encode_mixes_with_sentence_mean() {
        let model = ToyModel::from_table(
            vec!["a".into(), "b".into()],
            vec![1.0, 0.0, 0.0, 1.0],
            2,
            0.5,
        )
        .unwrap();
        let m = model.encode("s", &[0, 1]).unwrap();
        assert_eq!(m.row(0), &[0.75, 0.25]);
        assert_eq!(m.row(1), &[0.25, 0.75]);
    }

    #[test]
    fn mixer_backprop_matches_finite_differences() {
        let corpus = SynonymCorpus::new(12, 2, 3).unwrap();
        let model = ToyModel::random(corpus.vocab().to_vec(), 4, 0.5, 1.0, 3).unwrap();
        let tokens = [0, 5, 7];
        let weights: Vec<f64> = (0..12).map(|k| (k as f64 * 0.37).sin()).collect();
        let objective = |m: &ToyModel| -> f64 {
            let h = m.encode("s", &tokens).unwrap();
            h.as_flat().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut grad = vec![0.0; model.table().len()];
        model.backprop(&tokens, &weights, &mut grad);
        let eps = 1e-6;
        for (k, &g) in grad.iter().enumerate() {
            let mut plus = model.clone();
            plus.table[k] += eps;
            let mut minus = model.clone();
            minus.table[k] -= eps;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            assert!((fd - g).abs() <= 1e-8, "{k}: {fd} vs {g}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() <= 1e-8);
        assert!((p[1] + 0.9).abs() <= 1e-8);
    }

    #[test]
    fn zero_steps_is_noop() {
        let config = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let corpus = config.corpus().unwrap();
        let mut model = config.init_model(&corpus).unwrap();
        let before = model.clone();
        let trace = train_toy(&mut model, &corpus, &config).unwrap();
        assert!(trace.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn short_runs_are_deterministic() {
        let config = TrainConfig {
            steps: 5,
            ..TrainConfig::default()
        };
        let corpus = config.corpus().unwrap();
        let run = || {
            let mut model = config.init_model(&corpus).unwrap();
            let trace = train_toy(&mut model, &corpus, &config).unwrap();
            (trace, model)
        };
        let (t1, m1) = run();
        let (t2, m2) = run();
        assert_eq!(t1, t2);
        let bits = |m: &ToyModel| m.table().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m1), bits(&m2));
    }

    #[test]
    fn checkpoint_round_trip() {
        let corpus = SynonymCorpus::new(12, 2, 3).unwrap();
        let model = ToyModel::random(corpus.vocab().to_vec(), 4, 0.5, 0.02, 9).unwrap();
        let back = ToyModel::from_corpus(&model.to_corpus().unwrap()).unwrap();
        assert_eq!(model, back);
    }
}
