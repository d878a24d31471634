use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rcmd::alignment::{
    align_pair, alignment_f1, read_chunk_records, token_contributions, AlignedPair, ChunkMap,
    ChunkRecord, ContribVariant, F1Counts, F1Score,
};
use rcmd::contrastive::DEFAULT_TAU;
use rcmd::embedding::{load_corpus, write_corpus, CorpusFormat, EmbeddingCorpus};
use rcmd::evaluation::{bench, evaluate_sts, read_pairs_tsv, BenchConfig, ScoredPair};
use rcmd::similarity::{SimilarityMethod, Storage};
use rcmd::toy::{train_toy, TrainConfig};
use rcmd::transport::{transport_pair, PlanMethod};
use rcmd::Error;

#[derive(Parser)]
#[command(
    name = "rcmd",
    version,
    about = "Relaxed optimal-transport sentence similarity"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score sentence pairs; prints Spearman to stderr when gold scores are present.
    Score(ScoreArgs),
    /// Extract chunk alignments from transport plans.
    Align(AlignArgs),
    /// Export the token contribution matrix of one pair as CSV.
    Heatmap(HeatmapArgs),
    /// Train the toy encoder with the contrastive objective.
    Train(TrainArgs),
    /// Time similarity computation and count stored cost entries.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Avg,
    Rcmd1,
    Rcmd2,
    Rcmd,
    Emd,
}

impl MethodArg {
    fn plan(self) -> PlanMethod {
        match self {
            MethodArg::Avg => PlanMethod::Avg,
            MethodArg::Rcmd1 => PlanMethod::Rcmd1,
            MethodArg::Rcmd2 => PlanMethod::Rcmd2,
            MethodArg::Rcmd => PlanMethod::Rcmd,
            MethodArg::Emd => PlanMethod::Exact,
        }
    }

    fn similarity(self) -> Option<SimilarityMethod> {
        match self {
            MethodArg::Avg => Some(SimilarityMethod::Avg),
            MethodArg::Rcmd1 => Some(SimilarityMethod::Rcmd1),
            MethodArg::Rcmd2 => Some(SimilarityMethod::Rcmd2),
            MethodArg::Rcmd => Some(SimilarityMethod::Rcmd),
            MethodArg::Emd => None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StorageArg {
    Dense,
    Sparse,
}

impl From<StorageArg> for Storage {
    fn from(s: StorageArg) -> Self {
        match s {
            StorageArg::Dense => Storage::Dense,
            StorageArg::Sparse => Storage::Sparse,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    OneMinusM,
    M,
}

impl From<VariantArg> for ContribVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::OneMinusM => ContribVariant::OneMinusM,
            VariantArg::M => ContribVariant::M,
        }
    }
}

#[derive(Args)]
struct CorpusArgs {
    /// Token embeddings (.jsonl, or the binary format for any other extension).
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Tab-separated `id sid1 sid2 [gold]`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_enum, default_value = "rcmd")]
    method: MethodArg,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    pairs: PathBuf,
    /// JSON lines `{"id", "chunks1", "chunks2", "gold"?}` keyed by pair id.
    #[arg(long)]
    chunks: PathBuf,
    #[arg(long, value_enum, default_value = "rcmd")]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "one-minus-m")]
    contrib_variant: VariantArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// First sentence id.
    sentence1: String,
    /// Second sentence id.
    sentence2: String,
    #[arg(long, value_enum, default_value = "rcmd")]
    method: MethodArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    group_size: usize,
    #[arg(long, default_value_t = 5)]
    sentence_len: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Weight of the sentence mean in each token state.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    init_std: f64,
    #[arg(long, default_value_t = 64)]
    validation_pairs: usize,
    /// Output directory; receives `trace.csv` and `model.bin`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Methods to time; defaults to avg, rcmd/dense and rcmd/sparse.
    #[arg(long, value_enum, value_delimiter = ',')]
    method: Vec<MethodArg>,
    /// Storage modes paired with every method given by --method.
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "dense,sparse"
    )]
    storage: Vec<StorageArg>,
    /// Independent pairs timed per length; 0 skips the pair workload.
    #[arg(long, default_value_t = 512)]
    num_pairs: usize,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    batch_size: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,48,64,128")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Time scoring only, leaving token encoding out of the timed region.
    #[arg(long)]
    no_encode: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("cannot write {path}: {source}")]
    Output { path: String, source: io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) if e.is_guard() => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Score(a) => cmd_score(a),
        Command::Align(a) => cmd_align(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rcmd: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn open_input(path: &Path, what: &str) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Usage(format!("cannot open {what} {}: {e}", path.display())))
}

fn load(args: &CorpusArgs) -> CliResult<EmbeddingCorpus> {
    if !args.corpus.exists() {
        return Err(CliError::Usage(format!(
            "corpus {} does not exist",
            args.corpus.display()
        )));
    }
    Ok(load_corpus(
        &args.corpus,
        CorpusFormat::from_path(&args.corpus),
    )?)
}

fn load_pairs(path: &Path) -> CliResult<Vec<ScoredPair>> {
    Ok(read_pairs_tsv(open_input(path, "pair file")?)?)
}

/// Runs `f` against stdout or a buffered file.
fn with_output(
    out: Option<&Path>,
    f: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> CliResult<()> {
    let name = out.map_or_else(|| "stdout".to_string(), |p| p.display().to_string());
    let wrap = |source| CliError::Output {
        path: name.clone(),
        source,
    };
    match out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(wrap)?);
            f(&mut w).and_then(|_| w.flush()).map_err(wrap)
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            f(&mut w).and_then(|_| w.flush()).map_err(wrap)
        }
    }
}

fn cmd_score(args: ScoreArgs) -> CliResult<()> {
    let corpus = load(&args.corpus)?;
    let pairs = load_pairs(&args.pairs)?;
    let result = evaluate_sts(&corpus, &pairs, args.method.plan())?;
    with_output(args.out.as_deref(), |mut w| result.write_tsv(&mut w))?;
    if let Some(rho) = result.spearman {
        eprintln!("spearman\t{rho}");
    }
    Ok(())
}

#[derive(Serialize)]
struct AlignOut {
    id: String,
    method: &'static str,
    alignment: Vec<AlignedPair>,
    #[serde(skip_serializing_if = "Option::is_none")]
    f1: Option<F1Score>,
}

fn cmd_align(args: AlignArgs) -> CliResult<()> {
    let records = read_chunk_records(open_input(&args.chunks, "chunk file")?)?;
    let corpus = load(&args.corpus)?;
    let pairs = load_pairs(&args.pairs)?;
    let by_id: std::collections::HashMap<&str, &ChunkRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let method = args.method.plan();
    let mut totals = F1Counts::default();
    let mut any_gold = false;
    let mut out = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let a = corpus.require(&p.sentence1)?;
        let b = corpus.require(&p.sentence2)?;
        let record = by_id.get(p.id.as_str());
        let (m1, m2) = match record {
            Some(r) => r.maps(a.len(), b.len())?,
            None => (ChunkMap::singletons(a.len()), ChunkMap::singletons(b.len())),
        };
        let aligned = align_pair(a, b, method, &m1, &m2, args.contrib_variant.into())?;
        let f1 = record.and_then(|r| r.gold_alignment()).map(|gold| {
            any_gold = true;
            totals.add(&aligned.alignment, &gold);
            alignment_f1(&aligned.alignment, &gold)
        });
        out.push(AlignOut {
            id: p.id.clone(),
            method: method.as_str(),
            alignment: aligned.alignment.pairs.clone(),
            f1,
        });
    }
    with_output(args.out.as_deref(), |w| {
        for rec in &out {
            serde_json::to_writer(&mut *w, rec).map_err(io::Error::from)?;
            writeln!(w)?;
        }
        Ok(())
    })?;
    if any_gold {
        let s = totals.score();
        eprintln!(
            "precision\t{}\nrecall\t{}\nf1\t{}",
            s.precision, s.recall, s.f1
        );
    }
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> CliResult<()> {
    let corpus = load(&args.corpus)?;
    let a = corpus.require(&args.sentence1)?;
    let b = corpus.require(&args.sentence2)?;
    let transport = transport_pair(a, b, args.method.plan())?;
    let contrib = token_contributions(&transport.plan, &transport.cost)?;
    with_output(args.out.as_deref(), |w| {
        w.write_all(contrib.matrix().to_csv().as_bytes())
    })?;
    eprintln!(
        "distance\t{}\nmass\t{}\nsum\t{}",
        transport.distance.value,
        transport.mass(),
        contrib.total()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let config = TrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        lr: args.lr,
        tau: args.tau,
        seed: args.seed,
        vocab_size: args.vocab_size,
        group_size: args.group_size,
        sentence_len: args.sentence_len,
        dim: args.dim,
        lambda: args.lambda,
        init_std: args.init_std,
        validation_pairs: args.validation_pairs,
    };
    let corpus = config.corpus()?;
    let mut model = config.init_model(&corpus)?;
    let trace = train_toy(&mut model, &corpus, &config)?;
    std::fs::create_dir_all(&args.out).map_err(|source| CliError::Output {
        path: args.out.display().to_string(),
        source,
    })?;
    let trace_path = args.out.join("trace.csv");
    with_output(Some(&trace_path), |mut w| trace.write_csv(&mut w))?;
    write_corpus(
        &model.to_corpus()?,
        &args.out.join("model.bin"),
        CorpusFormat::Binary,
    )?;
    eprintln!(
        "loss\t{} -> {}\nmean_pos_sim\t{} -> {}\nalignment_f1\t{} -> {}",
        trace.initial.loss,
        trace.last.loss,
        trace.initial.mean_pos_sim,
        trace.last.mean_pos_sim,
        trace.initial.alignment_acc,
        trace.last.alignment_acc
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    let mut methods = Vec::new();
    if args.method.is_empty() {
        methods = BenchConfig::default().methods;
    } else {
        for m in &args.method {
            let sim = m
                .similarity()
                .ok_or_else(|| CliError::Usage("bench does not time the exact solver".into()))?;
            if sim.is_rcmd() {
                methods.extend(args.storage.iter().map(|&s| (sim, s.into())));
            } else {
                methods.push((sim, Storage::Dense));
            }
        }
    }
    let config = BenchConfig {
        methods,
        pairs: args.num_pairs,
        batch_sizes: args.batch_size,
        lengths: args.lengths,
        dim: args.dim,
        repeats: args.repeats,
        seed: args.seed,
        encode: !args.no_encode,
    };
    let report = bench(&config)?;
    with_output(args.out.as_deref(), |mut w| report.write_csv(&mut w))?;
    Ok(())
}
