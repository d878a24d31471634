//! Token-embedding storage.
//!
//! Embeddings are produced offline by some encoder and handed to this crate
//! either as JSONL (one sentence per line) or as a compact little-endian
//! binary container. Every row provided is treated as a token; no special
//! tokens are added or stripped.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BINARY_MAGIC: &[u8; 4] = b"TMV1";

/// Contextualized token embeddings of one sentence, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    id: String,
    tokens: Vec<String>,
    data: Vec<f64>,
    dim: usize,
    norms: Vec<f64>,
    sq_norms: Vec<f64>,
}

impl TokenMatrix {
    /// Build from per-token rows. Validates shape, finiteness and that no
    /// row is the zero vector.
    pub fn new(id: impl Into<String>, tokens: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let id = id.into();
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(id, tokens, data, dim)
    }

    /// Build from a flat row-major buffer of `tokens.len() * dim` values.
    pub fn from_flat(
        id: impl Into<String>,
        tokens: Vec<String>,
        data: Vec<f64>,
        dim: usize,
    ) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(Error::InvalidMatrix {
                id,
                message: "a sentence needs at least one token".into(),
            });
        }
        if dim == 0 {
            return Err(Error::InvalidMatrix {
                id,
                message: "embedding dimension must be at least 1".into(),
            });
        }
        if data.len() != tokens.len() * dim {
            return Err(Error::InvalidMatrix {
                id,
                message: format!(
                    "{} tokens of dimension {dim} need {} values, got {}",
                    tokens.len(),
                    tokens.len() * dim,
                    data.len()
                ),
            });
        }
        let mut norms = Vec::with_capacity(tokens.len());
        let mut sq_norms = Vec::with_capacity(tokens.len());
        for (row, chunk) in data.chunks_exact(dim).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { id, row });
            }
            let sq = chunk.iter().map(|v| v * v).sum::<f64>();
            if sq == 0.0 {
                return Err(Error::ZeroVector { id, row });
            }
            norms.push(sq.sqrt());
            sq_norms.push(sq);
        }
        Ok(Self {
            id,
            tokens,
            data,
            dim,
            norms,
            sq_norms,
        })
    }

    /// Rows with placeholder token strings `t0, t1, ...`.
    pub fn from_rows(id: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let tokens = (0..rows.len()).map(|i| format!("t{i}")).collect();
        Self::new(id, tokens, rows)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Number of tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Euclidean norm of row `i`, cached at construction.
    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    /// Squared norm of row `i`, summed in index order like a dot product.
    pub fn sq_norm(&self, i: usize) -> f64 {
        self.sq_norms[i]
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Same tokens with new vectors, revalidated.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::from_flat(self.id.clone(), self.tokens.clone(), data, self.dim)
    }
}

/// Pooled sentence vector `s = (1/L) Σ x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
}

impl SentenceEmbedding {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Row mean of the token matrix.
pub fn avg_pool(m: &TokenMatrix) -> SentenceEmbedding {
    let mut vector = vec![0.0; m.dim()];
    for row in m.rows() {
        for (acc, v) in vector.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let scale = 1.0 / m.len() as f64;
    vector.iter_mut().for_each(|v| *v *= scale);
    SentenceEmbedding { vector }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Binary,
}

impl CorpusFormat {
    /// `.jsonl`/`.json` is JSONL, anything else is the binary container.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Binary,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

/// Immutable id → matrix map with a uniform embedding dimension. Iteration
/// follows insertion order.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingCorpus {
    sentences: Vec<TokenMatrix>,
    index: HashMap<String, usize>,
    dim: usize,
}

impl EmbeddingCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_matrices(matrices: impl IntoIterator<Item = TokenMatrix>) -> Result<Self> {
        let mut corpus = Self::new();
        for m in matrices {
            corpus.insert(m)?;
        }
        Ok(corpus)
    }

    pub fn insert(&mut self, m: TokenMatrix) -> Result<()> {
        if self.sentences.is_empty() {
            self.dim = m.dim();
        } else if m.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: m.dim(),
            });
        }
        if self.index.contains_key(m.id()) {
            return Err(Error::DuplicateId(m.id().to_string()));
        }
        self.index.insert(m.id().to_string(), self.sentences.len());
        self.sentences.push(m);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&TokenMatrix> {
        self.index.get(id).map(|&i| &self.sentences[i])
    }

    /// Lookup that reports a missing id as an error.
    pub fn require(&self, id: &str) -> Result<&TokenMatrix> {
        self.get(id)
            .ok_or_else(|| Error::MissingSentence(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Uniform embedding dimension; 0 for an empty corpus.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iter(&self) -> impl Iterator<Item = &TokenMatrix> {
        self.sentences.iter()
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<EmbeddingCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        CorpusFormat::Jsonl => read_jsonl(reader),
        CorpusFormat::Binary => read_binary(reader),
    }
}

pub fn write_corpus(corpus: &EmbeddingCorpus, path: &Path, format: CorpusFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    match format {
        CorpusFormat::Jsonl => write_jsonl(corpus, &mut writer),
        CorpusFormat::Binary => write_binary(corpus, &mut writer),
    }
    .and_then(|_| writer.flush().map_err(|e| Error::io(path, e)))
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<EmbeddingCorpus> {
    let mut corpus = EmbeddingCorpus::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.tokens.len() != record.vectors.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "{} tokens but {} vectors",
                    record.tokens.len(),
                    record.vectors.len()
                ),
            });
        }
        if !corpus.is_empty() {
            if let Some(bad) = record.vectors.iter().find(|v| v.len() != corpus.dim()) {
                return Err(Error::DimensionMismatch {
                    expected: corpus.dim(),
                    got: bad.len(),
                });
            }
        }
        let m = TokenMatrix::new(record.id, record.tokens, record.vectors)?;
        corpus.insert(m)?;
    }
    Ok(corpus)
}

pub fn write_jsonl<W: Write>(corpus: &EmbeddingCorpus, writer: &mut W) -> Result<()> {
    for m in corpus.iter() {
        let record = JsonRecord {
            id: m.id().to_string(),
            tokens: m.tokens().to_vec(),
            vectors: m.rows().map(<[f64]>::to_vec).collect(),
        };
        let line =
            serde_json::to_string(&record).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())
        .map_err(|e| Error::io("<binary>", e))
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())
        .map_err(|e| Error::io("<binary>", e))
}

pub fn write_binary<W: Write>(corpus: &EmbeddingCorpus, w: &mut W) -> Result<()> {
    w.write_all(BINARY_MAGIC)
        .map_err(|e| Error::io("<binary>", e))?;
    put_u32(w, corpus.dim())?;
    for m in corpus.iter() {
        put_str(w, m.id())?;
        put_u32(w, m.len())?;
        for t in m.tokens() {
            put_str(w, t)?;
        }
        for v in m.as_flat() {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io("<binary>", e))?;
        }
    }
    Ok(())
}

/// Byte reader tracking the record number for error messages.
struct BinReader<R> {
    inner: R,
    record: usize,
}

impl<R: Read> BinReader<R> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.record,
            message: message.into(),
        }
    }

    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| self.fail(format!("truncated binary corpus: {e}")))
    }

    fn u32(&mut self) -> Result<usize> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let mut buf = vec![0u8; n];
        self.exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| self.fail(e.to_string()))
    }

    /// Reads the next id length, or `None` at a clean end of input.
    fn next_record(&mut self) -> Result<Option<usize>> {
        let mut b = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = self
                .inner
                .read(&mut b[filled..])
                .map_err(|e| self.fail(e.to_string()))?;
            if n == 0 {
                return if filled == 0 {
                    Ok(None)
                } else {
                    Err(self.fail("truncated record header"))
                };
            }
            filled += n;
        }
        Ok(Some(u32::from_le_bytes(b) as usize))
    }
}

/// Binary records are numbered from 1 in place of line numbers.
pub fn read_binary<R: Read>(reader: R) -> Result<EmbeddingCorpus> {
    let mut r = BinReader {
        inner: reader,
        record: 0,
    };
    let mut magic = [0u8; 4];
    r.exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(r.fail("bad magic, expected TMV1"));
    }
    let dim = r.u32()?;
    let mut corpus = EmbeddingCorpus::new();
    while let Some(id_len) = r.next_record()? {
        r.record += 1;
        let mut id = vec![0u8; id_len];
        r.exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| r.fail(e.to_string()))?;
        let len = r.u32()?;
        let tokens = (0..len).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(len * dim);
        let mut b = [0u8; 8];
        for _ in 0..len * dim {
            r.exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        corpus.insert(TokenMatrix::from_flat(id, tokens, data, dim)?)?;
    }
    if corpus.is_empty() {
        corpus.dim = dim;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_corpus() -> EmbeddingCorpus {
        let a = TokenMatrix::new(
            "s1",
            vec!["a".into(), "cat".into()],
            vec![vec![1.0, 0.5, -0.25, 2.0], vec![0.1, 0.2, 0.3, 0.4]],
        )
        .unwrap();
        let b = TokenMatrix::new(
            "s2",
            vec!["dogs".into()],
            vec![vec![-1.0, 1.0 / 3.0, 1e-7, 12345.678]],
        )
        .unwrap();
        EmbeddingCorpus::from_matrices([a, b]).unwrap()
    }

    #[test]
    fn jsonl_round_trip() {
        let corpus = sample_corpus();
        let mut buf = Vec::new();
        write_jsonl(&corpus, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.dim(), 4);
        for m in corpus.iter() {
            let n = back.get(m.id()).unwrap();
            for (x, y) in m.as_flat().iter().zip(n.as_flat()) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-300));
            }
            assert_eq!(m.tokens(), n.tokens());
        }
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let corpus = sample_corpus();
        let mut buf = Vec::new();
        write_binary(&corpus, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"TMV1");
        let back = read_binary(buf.as_slice()).unwrap();
        for m in corpus.iter() {
            let n = back.get(m.id()).unwrap();
            let bits =
                |m: &TokenMatrix| m.as_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(m), bits(n));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let text = concat!(
            r#"{"id":"a","tokens":["x"],"vectors":[[1,2,3,4]]}"#,
            "\n",
            r#"{"id":"b","tokens":["y"],"vectors":[[1,2,3]]}"#,
            "\n"
        );
        match read_jsonl(text.as_bytes()) {
            Err(Error::DimensionMismatch {
                expected: 4,
                got: 3,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_row_is_named() {
        let text = r#"{"id":"z","tokens":["x","y"],"vectors":[[1,0],[0,0]]}"#;
        match read_jsonl(text.as_bytes()) {
            Err(Error::ZeroVector { id, row }) => {
                assert_eq!(id, "z");
                assert_eq!(row, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            r#"{"id":"a","tokens":["x"],"vectors":[[1,2]]}"#,
            "\n",
            "{not json\n"
        );
        match read_jsonl(text.as_bytes()) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = TokenMatrix::from_rows("a", vec![vec![1.0]]).unwrap();
        assert!(matches!(
            EmbeddingCorpus::from_matrices([m.clone(), m]),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn truncated_binary_is_parse_error() {
        let mut buf = Vec::new();
        write_binary(&sample_corpus(), &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_binary(buf.as_slice()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn avg_pool_examples() {
        let single = TokenMatrix::from_rows("a", vec![vec![3.0, -1.0]]).unwrap();
        assert_eq!(avg_pool(&single).vector, vec![3.0, -1.0]);
        let two = TokenMatrix::from_rows("b", vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(avg_pool(&two).vector, vec![0.5, 0.5]);
    }

    #[test]
    fn avg_pool_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let m = TokenMatrix::from_rows("r", rows.clone()).unwrap();
        let pooled = avg_pool(&m);
        for d in 0..6 {
            let mut sum = 0.0;
            for row in &rows {
                sum += row[d];
            }
            assert!((pooled.vector[d] - sum / 5.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn avg_pool_permutation_invariant() {
        let rows = vec![vec![1.0, 2.0], vec![-0.5, 4.0], vec![3.0, 0.25]];
        let a = TokenMatrix::from_rows("a", rows.clone()).unwrap();
        let b =
            TokenMatrix::from_rows("b", vec![rows[2].clone(), rows[0].clone(), rows[1].clone()])
                .unwrap();
        for (x, y) in avg_pool(&a).vector.iter().zip(&avg_pool(&b).vector) {
            assert!((x - y).abs() <= 1e-15);
        }
    }
}
