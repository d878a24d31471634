//! STS-style scoring, rank correlation and the inference benchmark.

use std::fmt;
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::embedding::{EmbeddingCorpus, TokenMatrix};
use crate::error::{Error, Result};
use crate::similarity::{
    batch_similarity, sim_avg, sim_rcmd, sim_rcmd1, sim_rcmd2, SimilarityMethod, SparseRcmd,
    Storage,
};
use crate::toy::{SynonymCorpus, ToyModel};
use crate::transport::{transport_pair, PlanMethod};

/// Rank correlation, or an explicit marker when either input has zero variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    Value(f64),
    Undefined,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Value(v) => Some(v),
            Correlation::Undefined => None,
        }
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correlation::Value(v) => write!(f, "{v}"),
            Correlation::Undefined => f.write_str("undefined"),
        }
    }
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Correlation {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Correlation::Undefined;
    }
    Correlation::Value((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<Correlation> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument(
            "spearman needs at least one pair".into(),
        ));
    }
    Ok(pearson(&average_ranks(pred), &average_ranks(gold)))
}

/// One line of a pair file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredPair {
    pub id: String,
    pub sentence1: String,
    pub sentence2: String,
    pub gold: Option<f64>,
}

/// `id<TAB>sid1<TAB>sid2[<TAB>gold]`. Blank lines and `#` comments are skipped.
pub fn read_pairs_tsv<R: BufRead>(reader: R) -> Result<Vec<ScoredPair>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let gold = match fields.as_slice() {
            [_, _, _] => None,
            [_, _, _, g] if g.trim().is_empty() => None,
            [_, _, _, g] => Some(g.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad gold score {g:?}: {e}"),
            })?),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 3 or 4 tab-separated fields, got {}", fields.len()),
                })
            }
        };
        out.push(ScoredPair {
            id: fields[0].to_string(),
            sentence1: fields[1].to_string(),
            sentence2: fields[2].to_string(),
            gold,
        });
    }
    Ok(out)
}

pub fn write_pairs_tsv<W: Write>(pairs: &[ScoredPair], w: &mut W) -> std::io::Result<()> {
    for p in pairs {
        match p.gold {
            Some(g) => writeln!(w, "{}\t{}\t{}\t{g}", p.id, p.sentence1, p.sentence2)?,
            None => writeln!(w, "{}\t{}\t{}", p.id, p.sentence1, p.sentence2)?,
        }
    }
    Ok(())
}

/// Sentence similarity under any plan method; EXACT scores `1 - d_EMD`
/// over the cosine cost.
pub fn score_pair(a: &TokenMatrix, b: &TokenMatrix, method: PlanMethod) -> Result<f64> {
    Ok(match method {
        PlanMethod::Avg => sim_avg(a, b)?.value,
        PlanMethod::Rcmd1 => sim_rcmd1(a, b)?.value,
        PlanMethod::Rcmd2 => sim_rcmd2(a, b)?.value,
        PlanMethod::Rcmd => sim_rcmd(a, b)?.value,
        PlanMethod::Exact => 1.0 - transport_pair(a, b, PlanMethod::Exact)?.distance.value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairScore {
    pub id: String,
    pub score: f64,
    pub gold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsResult {
    pub scores: Vec<PairScore>,
    /// `None` when no pair carries a gold score.
    pub spearman: Option<Correlation>,
}

impl StsResult {
    /// `id<TAB>score[<TAB>gold]` per pair.
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for s in &self.scores {
            match s.gold {
                Some(g) => writeln!(w, "{}\t{}\t{g}", s.id, s.score)?,
                None => writeln!(w, "{}\t{}", s.id, s.score)?,
            }
        }
        Ok(())
    }
}

/// Score every pair and correlate with gold over the pairs that have it.
pub fn evaluate_sts(
    corpus: &EmbeddingCorpus,
    pairs: &[ScoredPair],
    method: PlanMethod,
) -> Result<StsResult> {
    let mut scores = Vec::with_capacity(pairs.len());
    for p in pairs {
        let a = corpus.require(&p.sentence1)?;
        let b = corpus.require(&p.sentence2)?;
        scores.push(PairScore {
            id: p.id.clone(),
            score: score_pair(a, b, method)?,
            gold: p.gold,
        });
    }
    let (pred, gold): (Vec<f64>, Vec<f64>) = scores
        .iter()
        .filter_map(|s| s.gold.map(|g| (s.score, g)))
        .unzip();
    let spearman = if gold.is_empty() {
        None
    } else {
        Some(spearman(&pred, &gold)?)
    };
    Ok(StsResult { scores, spearman })
}

/// Synthetic STS set on which pooled-embedding cosine is uninformative.
///
/// Sentences are encoded by a [`ToyModel::planted`] encoder. Positives
/// (gold 1) pair a sentence with its synonym-substituted permutation.
/// Negatives (gold 0) pair it with a sentence over disjoint synonym groups,
/// chosen greedily so the two pooled embeddings nearly coincide.
#[derive(Debug, Clone)]
pub struct AdversarialConfig {
    pub pairs_per_class: usize,
    pub vocab_size: usize,
    pub sentence_len: usize,
    pub dim: usize,
    /// Spread of synonyms around their group direction.
    pub noise: f64,
    /// Coordinate-descent sweeps of the mean-matching search.
    pub sweeps: usize,
    pub seed: u64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            pairs_per_class: 50,
            vocab_size: 200,
            sentence_len: 5,
            dim: 16,
            noise: 0.3,
            sweeps: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdversarialSet {
    pub corpus: EmbeddingCorpus,
    pub pairs: Vec<ScoredPair>,
    pub model: ToyModel,
}

fn table_mean(model: &ToyModel, tokens: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; model.dim()];
    for &t in tokens {
        for (m, v) in mean.iter_mut().zip(model.row(t)) {
            *m += v / tokens.len() as f64;
        }
    }
    mean
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Tokens from groups disjoint with `anchor` whose table mean approaches the
/// anchor's. The pooled embedding of an encoded sentence is exactly its
/// table mean, whatever the mixer.
fn mean_matched_negative<R: Rng>(
    model: &ToyModel,
    corpus: &SynonymCorpus,
    anchor: &[usize],
    sweeps: usize,
    rng: &mut R,
) -> Vec<usize> {
    let target = table_mean(model, anchor);
    let banned: Vec<usize> = anchor.iter().map(|&t| corpus.group_of(t)).collect();
    let pool: Vec<usize> = (0..corpus.vocab().len())
        .filter(|&t| !banned.contains(&corpus.group_of(t)))
        .collect();
    let mut current: Vec<usize> = pool.choose_multiple(rng, anchor.len()).copied().collect();
    for _ in 0..sweeps {
        for slot in 0..current.len() {
            let mut best = (current[slot], f64::INFINITY);
            for &cand in &pool {
                if current
                    .iter()
                    .enumerate()
                    .any(|(k, &t)| k != slot && corpus.group_of(t) == corpus.group_of(cand))
                {
                    continue;
                }
                let mut trial = current.clone();
                trial[slot] = cand;
                let d = sq_dist(&table_mean(model, &trial), &target);
                if d < best.1 {
                    best = (cand, d);
                }
            }
            current[slot] = best.0;
        }
    }
    current
}

pub fn adversarial_sts_set(config: &AdversarialConfig) -> Result<AdversarialSet> {
    let corpus = SynonymCorpus::new(config.vocab_size, 2, config.sentence_len)?;
    let model = ToyModel::planted(
        &corpus,
        config.dim,
        ToyModel::DEFAULT_LAMBDA,
        config.noise,
        config.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut sentences = EmbeddingCorpus::new();
    let mut pairs = Vec::with_capacity(2 * config.pairs_per_class);
    for k in 0..config.pairs_per_class {
        let triple = corpus.sample(&mut rng);
        let negative =
            mean_matched_negative(&model, &corpus, &triple.anchor, config.sweeps, &mut rng);
        let (a, p, n) = (format!("a{k}"), format!("p{k}"), format!("n{k}"));
        sentences.insert(model.encode(&a, &triple.anchor)?)?;
        sentences.insert(model.encode(&p, &triple.positive)?)?;
        sentences.insert(model.encode(&n, &negative)?)?;
        pairs.push(ScoredPair {
            id: format!("pos{k}"),
            sentence1: a.clone(),
            sentence2: p,
            gold: Some(1.0),
        });
        pairs.push(ScoredPair {
            id: format!("neg{k}"),
            sentence1: a,
            sentence2: n,
            gold: Some(0.0),
        });
    }
    Ok(AdversarialSet {
        corpus: sentences,
        pairs,
        model,
    })
}

/// What one benchmark cell measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    /// `n` independent sentence pairs, each scored once.
    Pairs,
    /// All `B × B` anchor-candidate scores of a batch.
    Batch,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub methods: Vec<(SimilarityMethod, Storage)>,
    /// Pair count for the [`Workload::Pairs`] rows; 0 disables them.
    pub pairs: usize,
    /// Batch sizes for the [`Workload::Batch`] rows.
    pub batch_sizes: Vec<usize>,
    pub lengths: Vec<usize>,
    pub dim: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Include token encoding by a toy encoder in the timed region.
    pub encode: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![
                (SimilarityMethod::Avg, Storage::Dense),
                (SimilarityMethod::Rcmd, Storage::Dense),
                (SimilarityMethod::Rcmd, Storage::Sparse),
            ],
            pairs: 512,
            batch_sizes: vec![16, 32, 64, 128],
            lengths: vec![8, 16, 32, 48, 64, 128],
            dim: 64,
            repeats: 10,
            seed: 0,
            encode: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub workload: Workload,
    pub method: SimilarityMethod,
    pub storage: Storage,
    pub batch_size: usize,
    pub length: usize,
    pub pairs: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// `pairs × L²`: cost entries of the full matrices.
    pub dense_entries: usize,
    /// `pairs × 2L`: row-minimum plus column-minimum slots of the sparse path.
    pub sparse_entries: usize,
    /// Entries actually retained by the measured path.
    pub measured_entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const HEADER: &'static str = "# single-threaded; warm-up excluded; monotonic clock";

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        writeln!(
            w,
            "workload,method,storage,batch_size,length,pairs,mean_ms,median_ms,dense_entries,sparse_entries,measured_entries"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                match r.workload {
                    Workload::Pairs => "pairs",
                    Workload::Batch => "batch",
                },
                r.method.as_str(),
                match r.storage {
                    Storage::Dense => "dense",
                    Storage::Sparse => "sparse",
                },
                r.batch_size,
                r.length,
                r.pairs,
                r.mean_ms,
                r.median_ms,
                r.dense_entries,
                r.sparse_entries,
                r.measured_entries
            )?;
        }
        Ok(())
    }

    pub fn find(
        &self,
        workload: Workload,
        method: SimilarityMethod,
        storage: Storage,
        length: usize,
    ) -> Option<&BenchRow> {
        self.rows.iter().find(|r| {
            r.workload == workload
                && r.method == method
                && r.storage == storage
                && r.length == length
        })
    }
}

/// Input sentences for one cell: token ids for the encoded path, plus the
/// precomputed matrices for the raw path.
struct CellInput {
    ids: Vec<Vec<usize>>,
    matrices: Vec<TokenMatrix>,
}

fn cell_input(model: &ToyModel, n: usize, len: usize, rng: &mut ChaCha8Rng) -> Result<CellInput> {
    let vocab = model.vocab().len();
    let ids: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..len).map(|_| rng.gen_range(0..vocab)).collect())
        .collect();
    let matrices = ids
        .iter()
        .enumerate()
        .map(|(k, t)| model.encode(format!("s{k}"), t))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellInput { ids, matrices })
}

fn summarize(mut samples: Vec<f64>) -> (f64, f64) {
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    let median = if samples.len().is_multiple_of(2) {
        0.5 * (samples[mid - 1] + samples[mid])
    } else {
        samples[mid]
    };
    (mean, median)
}

/// Runs `work` once as warm-up, then `repeats` timed times.
fn time_it(repeats: usize, mut work: impl FnMut() -> Result<usize>) -> Result<(f64, f64, usize)> {
    let measured = work()?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(work()?);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let (mean, median) = summarize(samples);
    Ok((mean, median, measured))
}

fn encode_all(model: &ToyModel, ids: &[Vec<usize>]) -> Result<Vec<TokenMatrix>> {
    ids.iter()
        .enumerate()
        .map(|(k, t)| model.encode(format!("s{k}"), t))
        .collect()
}

/// Timing and storage accounting. Runs on the calling thread only.
pub fn bench(config: &BenchConfig) -> Result<BenchReport> {
    if config.lengths.contains(&0) {
        return Err(Error::InvalidArgument(
            "benchmark lengths must be at least 1".into(),
        ));
    }
    if config.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab: Vec<String> = (0..1000).map(|t| format!("v{t}")).collect();
    let model = ToyModel::random(
        vocab,
        config.dim,
        ToyModel::DEFAULT_LAMBDA,
        1.0,
        config.seed,
    )?;
    let mut rows = Vec::new();
    for &len in &config.lengths {
        if config.pairs > 0 {
            let left = cell_input(&model, config.pairs, len, &mut rng)?;
            let right = cell_input(&model, config.pairs, len, &mut rng)?;
            for &(method, storage) in &config.methods {
                let (mean_ms, median_ms, measured) = time_it(config.repeats, || {
                    let encoded: (Vec<TokenMatrix>, Vec<TokenMatrix>);
                    let (a, b): (&[TokenMatrix], &[TokenMatrix]) = if config.encode {
                        encoded = (
                            encode_all(&model, &left.ids)?,
                            encode_all(&model, &right.ids)?,
                        );
                        (&encoded.0, &encoded.1)
                    } else {
                        (&left.matrices, &right.matrices)
                    };
                    let mut kept = 0;
                    for (x, y) in a.iter().zip(b) {
                        let (score, n) = crate::similarity::pair_similarity(x, y, method, storage)?;
                        std::hint::black_box(score);
                        kept += n;
                    }
                    Ok(kept)
                })?;
                rows.push(row(
                    Workload::Pairs,
                    method,
                    storage,
                    0,
                    len,
                    config.pairs,
                    mean_ms,
                    median_ms,
                    measured,
                ));
            }
        }
        for &b in &config.batch_sizes {
            let anchors = cell_input(&model, b, len, &mut rng)?;
            let positives = cell_input(&model, b, len, &mut rng)?;
            for &(method, storage) in &config.methods {
                let (mean_ms, median_ms, measured) = time_it(config.repeats, || {
                    let out = batch_similarity(
                        &anchors.matrices,
                        &positives.matrices,
                        None,
                        method,
                        storage,
                    )?;
                    Ok(out.stored_entries)
                })?;
                rows.push(row(
                    Workload::Batch,
                    method,
                    storage,
                    b,
                    len,
                    b * b,
                    mean_ms,
                    median_ms,
                    measured,
                ));
            }
        }
    }
    Ok(BenchReport { rows })
}

#[allow(clippy::too_many_arguments)]
fn row(
    workload: Workload,
    method: SimilarityMethod,
    storage: Storage,
    batch_size: usize,
    length: usize,
    pairs: usize,
    mean_ms: f64,
    median_ms: f64,
    measured_entries: usize,
) -> BenchRow {
    let rcmd = method.is_rcmd();
    BenchRow {
        workload,
        method,
        storage,
        batch_size,
        length,
        pairs,
        mean_ms,
        median_ms,
        dense_entries: if rcmd { pairs * length * length } else { 0 },
        sparse_entries: if rcmd { pairs * 2 * length } else { 0 },
        measured_entries,
    }
}

/// Row-minimum plus column-minimum slots held by the sparse path for one
/// pair, before deduplication.
pub fn sparse_slots(a: &TokenMatrix, b: &TokenMatrix) -> Result<usize> {
    let s = SparseRcmd::build(a, b)?;
    let (rows, cols) = s.shape();
    Ok(rows + cols)
}

/// Random Gaussian sentence, for tests and benchmarks that need raw matrices.
pub fn random_sentence<R: Rng>(
    rng: &mut R,
    id: impl Into<String>,
    len: usize,
    dim: usize,
) -> Result<TokenMatrix> {
    let rows = (0..len)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    TokenMatrix::from_rows(id, rows)
}
