//! Full-softmax CBOW word embeddings and the word2vec-style text format.
//!
//! Each token `w` at position `n` is predicted from the sum of the context
//! vectors of its neighbours, `w ~ softmax(rho^T alpha_ctx_sum)`. `rho` (the
//! output embeddings, `L x V`) is the matrix exported for topic modeling.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::rng;
use crate::tensorcore::{log_softmax, AdamConfig, AdamState, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{} vocabulary terms missing from embedding file", .0.len())]
    MissingTerms(Vec<String>),
    #[error("unknown term {0:?}")]
    UnknownTerm(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// `L x V` embedding matrix; column `v` embeds term `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rho: Tensor,
    terms: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(rho: Tensor, terms: Vec<String>) -> Result<Self, EmbeddingError> {
        if rho.shape().len() != 2 || rho.cols() != terms.len() {
            return Err(EmbeddingError::DimensionMismatch(format!(
                "matrix shape {:?} does not match {} terms",
                rho.shape(),
                terms.len()
            )));
        }
        if !rho.is_finite() {
            return Err(TensorError::NonFinite { op: "embedding matrix" }.into());
        }
        Ok(Self { rho, terms })
    }

    pub fn rho(&self) -> &Tensor {
        &self.rho
    }

    pub fn into_rho(self) -> Tensor {
        self.rho
    }

    pub fn dim(&self) -> usize {
        self.rho.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.rho.cols()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn column(&self, v: usize) -> Vec<f64> {
        (0..self.dim()).map(|l| self.rho.get(l, v)).collect()
    }

    /// Word2vec-style text: header `V L`, then `term x_1 .. x_L` per line.
    /// Values use the shortest representation that parses back exactly.
    pub fn write(&self, path: &Path) -> Result<(), EmbeddingError> {
        let file = fs::File::create(path).map_err(|source| io_err(path, source))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "{} {}", self.vocab_size(), self.dim())?;
            for (v, term) in self.terms.iter().enumerate() {
                write!(w, "{term}")?;
                for l in 0..self.dim() {
                    write!(w, " {}", self.rho.get(l, v))?;
                }
                writeln!(w)?;
            }
            w.flush()
        };
        emit().map_err(|source| io_err(path, source))
    }
}

/// Per-word context vectors, same `L x V` layout as `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbeddings {
    pub alpha_ctx: Tensor,
}

fn io_err(path: &Path, source: std::io::Error) -> EmbeddingError {
    EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Neighbour positions within `window` on each side of `position`.
fn context_positions(len: usize, position: usize, window: usize) -> impl Iterator<Item = usize> {
    let lo = position.saturating_sub(window);
    let hi = (position + window).min(len.saturating_sub(1));
    (lo..=hi).filter(move |&p| p != position)
}

/// Sum of the context vectors of the neighbours of `position`; the zero
/// vector when there are none.
pub fn cbow_context(tokens: &[usize], position: usize, window: usize, alpha_ctx: &Tensor) -> Vec<f64> {
    let dim = alpha_ctx.rows();
    let mut ctx = vec![0.0; dim];
    for p in context_positions(tokens.len(), position, window) {
        for (l, c) in ctx.iter_mut().enumerate() {
            *c += alpha_ctx.get(l, tokens[p]);
        }
    }
    ctx
}

/// Negative log-likelihood of every token of `tokens` under the full-softmax
/// CBOW model.
pub fn cbow_loss(tokens: &[usize], rho: &Tensor, alpha_ctx: &Tensor, window: usize) -> Result<f64, EmbeddingError> {
    if rho.shape() != alpha_ctx.shape() || rho.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "cbow_loss",
            left: rho.shape().to_vec(),
            right: alpha_ctx.shape().to_vec(),
        }
        .into());
    }
    let (dim, vocab) = (rho.rows(), rho.cols());
    let mut total = 0.0;
    for (n, &w) in tokens.iter().enumerate() {
        if w >= vocab {
            return Err(EmbeddingError::InvalidArgument(format!("term id {w} outside vocabulary of {vocab}")));
        }
        let ctx = cbow_context(tokens, n, window, alpha_ctx);
        let logits: Vec<f64> = (0..vocab)
            .map(|v| (0..dim).map(|l| rho.get(l, v) * ctx[l]).sum())
            .collect();
        total -= log_softmax(&logits)?[w];
    }
    if total.is_finite() {
        Ok(total)
    } else {
        Err(TensorError::NonFinite { op: "cbow_loss" }.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbowConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    /// Token positions per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CbowConfig {
    fn default() -> Self {
        Self {
            dim: 300,
            window: 4,
            epochs: 5,
            batch_size: 256,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CbowTraining {
    pub embeddings: EmbeddingMatrix,
    pub context: ContextEmbeddings,
    /// Mean per-token loss of each epoch, measured on the minibatches as they
    /// were visited.
    pub epoch_losses: Vec<f64>,
}

/// Initial `(rho, alpha_ctx)`, uniform in `[-0.5/L, 0.5/L]`.
pub fn init_cbow(vocab_size: usize, dim: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = rng::stream(seed, "cbow-init");
    let half = 0.5 / dim as f64;
    let mut draw = |_| rng.random_range(-half..=half);
    let rho = Tensor::matrix(dim, vocab_size, (0..dim * vocab_size).map(&mut draw).collect()).expect("shape");
    let ctx = Tensor::matrix(dim, vocab_size, (0..dim * vocab_size).map(&mut draw).collect()).expect("shape");
    (rho, ctx)
}

/// Mean loss over `(sequence, position)` pairs, recorded on `g`. Returns the
/// loss node and the `(rho, alpha_ctx)` parameter nodes.
fn batch_loss(
    g: &mut Graph,
    rho: &Tensor,
    alpha_ctx: &Tensor,
    sequences: &[Vec<usize>],
    batch: &[(usize, usize)],
    window: usize,
) -> Result<(crate::tensorcore::Var, [crate::tensorcore::Var; 2]), TensorError> {
    let vocab = rho.cols();
    let b = batch.len();
    let mut ctx_counts = vec![0.0; b * vocab];
    let mut targets = vec![0.0; b * vocab];
    for (row, &(d, n)) in batch.iter().enumerate() {
        let tokens = &sequences[d];
        for p in context_positions(tokens.len(), n, window) {
            ctx_counts[row * vocab + tokens[p]] += 1.0;
        }
        targets[row * vocab + tokens[n]] = 1.0;
    }
    let rho_v = g.param(rho.clone());
    let ctx_v = g.param(alpha_ctx.clone());
    let counts = g.constant(Tensor::matrix(b, vocab, ctx_counts)?);
    let onehot = g.constant(Tensor::matrix(b, vocab, targets)?);
    let ctx_t = g.transpose(ctx_v)?;
    let hidden = g.matmul(counts, ctx_t)?;
    let logits = g.matmul(hidden, rho_v)?;
    let logp = g.log_softmax_rows(logits)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked)?;
    let loss = g.scale(total, -1.0 / b as f64)?;
    Ok((loss, [rho_v, ctx_v]))
}

/// Fits CBOW embeddings with Adam on shuffled minibatches of token positions.
/// `sequences` hold term ids below `vocab.len()`.
pub fn train_cbow(sequences: &[Vec<usize>], vocab: &Vocabulary, config: &CbowConfig) -> Result<CbowTraining, EmbeddingError> {
    if config.dim < 2 {
        return Err(EmbeddingError::InvalidArgument("embedding dimension must be at least 2".into()));
    }
    if config.window < 1 || config.batch_size < 1 {
        return Err(EmbeddingError::InvalidArgument("window and batch size must be positive".into()));
    }
    let vocab_size = vocab.len();
    if let Some(bad) = sequences.iter().flatten().find(|&&w| w >= vocab_size) {
        return Err(EmbeddingError::InvalidArgument(format!("term id {bad} outside vocabulary of {vocab_size}")));
    }
    if sequences.iter().all(Vec::is_empty) {
        return Err(EmbeddingError::EmptyCorpus);
    }

    let (mut rho, mut alpha_ctx) = init_cbow(vocab_size, config.dim, config.seed);
    // Positions without any neighbour carry no gradient signal.
    let mut positions: Vec<(usize, usize)> = sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.len() >= 2)
        .flat_map(|(d, s)| (0..s.len()).map(move |n| (d, n)))
        .collect();

    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &[&rho, &alpha_ctx], vec![false, false]);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    if !positions.is_empty() {
        for epoch in 0..config.epochs {
            positions.shuffle(&mut rng::indexed_stream(config.seed, "cbow-shuffle", epoch as u64));
            let mut loss_sum = 0.0;
            for batch in positions.chunks(config.batch_size) {
                let mut g = Graph::new();
                let (loss, params) = batch_loss(&mut g, &rho, &alpha_ctx, sequences, batch, config.window)?;
                loss_sum += g.scalar(loss) * batch.len() as f64;
                let grads = g.backward(loss, &params)?;
                adam.step(&mut [&mut rho, &mut alpha_ctx], grads.as_slice())?;
            }
            epoch_losses.push(loss_sum / positions.len() as f64);
        }
    }

    Ok(CbowTraining {
        embeddings: EmbeddingMatrix::new(rho, vocab.terms().to_vec())?,
        context: ContextEmbeddings { alpha_ctx },
        epoch_losses,
    })
}

/// Reads a word2vec-style text file and aligns its rows to `vocab`. Terms
/// in the file but not in `vocab` are ignored.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary) -> Result<EmbeddingMatrix, EmbeddingError> {
    let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
    let parse_err = |line: usize, message: String| EmbeddingError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    let [n_rows, dim] = dims[..] else {
        return Err(parse_err(1, "header must be \"V L\"".into()));
    };

    let mut columns: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    let mut body_rows = 0;
    for (i, line) in lines {
        body_rows += 1;
        let mut fields = line.split_whitespace();
        let term = fields.next().expect("non-empty line");
        let values: Vec<f64> = fields
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(i + 1, format!("bad value: {e}")))?;
        if values.len() != dim {
            return Err(EmbeddingError::DimensionMismatch(format!(
                "line {} has {} values, header declares {dim}",
                i + 1,
                values.len()
            )));
        }
        if let Some(id) = vocab.id(term) {
            columns[id] = Some(values);
        }
    }
    if body_rows != n_rows {
        return Err(EmbeddingError::DimensionMismatch(format!(
            "header declares {n_rows} rows, file has {body_rows}"
        )));
    }
    let missing: Vec<String> = columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_none())
        .map(|(id, _)| vocab.terms()[id].clone())
        .collect();
    if !missing.is_empty() {
        return Err(EmbeddingError::MissingTerms(missing));
    }
    let mut rho = Tensor::zeros(&[dim, vocab.len()]);
    let v_total = vocab.len();
    for (v, col) in columns.into_iter().enumerate() {
        for (l, x) in col.expect("checked").into_iter().enumerate() {
            rho.data_mut()[l * v_total + v] = x;
        }
    }
    EmbeddingMatrix::new(rho, vocab.terms().to_vec())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The `k` terms closest to `query` by cosine similarity, excluding the
/// query itself. Ties go to the lower term id.
pub fn nearest_neighbors(matrix: &EmbeddingMatrix, query: &str, k: usize) -> Result<Vec<(String, f64)>, EmbeddingError> {
    let q = matrix
        .terms
        .iter()
        .position(|t| t == query)
        .ok_or_else(|| EmbeddingError::UnknownTerm(query.to_owned()))?;
    let qv = matrix.column(q);
    let mut scored: Vec<(usize, f64)> = (0..matrix.vocab_size())
        .filter(|&v| v != q)
        .map(|v| (v, cosine(&qv, &matrix.column(v))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(v, s)| (matrix.terms[v].clone(), s))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(terms: &[&str]) -> Vocabulary {
        Vocabulary::from_terms(terms.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn ctx_matrix() -> Tensor {
        // columns a=(1,0), b=(0,2), c=(3,5)
        Tensor::from_rows(&[vec![1.0, 0.0, 3.0], vec![0.0, 2.0, 5.0]]).unwrap()
    }

    #[test]
    fn context_examples() {
        let a = ctx_matrix();
        assert_eq!(cbow_context(&[1], 0, 4, &a), vec![0.0, 0.0]);
        assert_eq!(cbow_context(&[0, 1, 2], 1, 1, &a), vec![4.0, 5.0]);
        assert_eq!(cbow_context(&[0, 0], 0, 1, &a), vec![1.0, 0.0]);
        assert_eq!(cbow_context(&[0, 1, 2, 0], 0, 2, &a), vec![3.0, 7.0]);
    }

    #[test]
    fn loss_examples() {
        let one = Tensor::from_rows(&[vec![0.7], vec![-0.2]]).unwrap();
        assert_eq!(cbow_loss(&[0, 0, 0], &one, &one, 2).unwrap(), 0.0);

        let zeros = Tensor::zeros(&[2, 2]);
        let l = cbow_loss(&[0, 1, 1], &zeros, &zeros, 1).unwrap();
        assert!((l - 3.0 * 2f64.ln()).abs() < 1e-15);

        // rho = I, context sum (1, 0) -> logits (1, 0), target 0
        let rho = Tensor::identity(2);
        let ctx = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let l = cbow_loss(&[0, 1], &rho, &ctx, 1).unwrap();
        let pos0 = (1.0 + (-1.0f64).exp()).ln();
        // position 1: context alpha_0 = 0 -> uniform
        assert!((l - (pos0 + 2f64.ln())).abs() < 1e-15);
        assert!((pos0 - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn graph_loss_matches_direct_loss_and_finite_differences() {
        let mut rng = rng::stream(3, "test");
        let (dim, v) = (3, 5);
        let rho = Tensor::matrix(dim, v, (0..dim * v).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let ctx = Tensor::matrix(dim, v, (0..dim * v).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let seqs = vec![vec![0, 3, 1, 4, 4, 2], vec![2, 1]];
        let batch: Vec<(usize, usize)> = seqs.iter().enumerate().flat_map(|(d, s)| (0..s.len()).map(move |n| (d, n))).collect();

        let direct: f64 = seqs.iter().map(|s| cbow_loss(s, &rho, &ctx, 2).unwrap()).sum::<f64>() / batch.len() as f64;
        let mut g = Graph::new();
        let (loss, params) = batch_loss(&mut g, &rho, &ctx, &seqs, &batch, 2).unwrap();
        assert!((g.scalar(loss) - direct).abs() < 1e-12);

        let grads = g.backward(loss, &params).unwrap();
        let f = |r: &Tensor, c: &Tensor| seqs.iter().map(|s| cbow_loss(s, r, c, 2).unwrap()).sum::<f64>() / batch.len() as f64;
        let h = 1e-5;
        for which in 0..2 {
            for j in 0..dim * v {
                let (mut rp, mut cp) = (rho.clone(), ctx.clone());
                let (mut rm, mut cm) = (rho.clone(), ctx.clone());
                if which == 0 {
                    rp.data_mut()[j] += h;
                    rm.data_mut()[j] -= h;
                } else {
                    cp.data_mut()[j] += h;
                    cm.data_mut()[j] -= h;
                }
                let numeric = (f(&rp, &cp) - f(&rm, &cm)) / (2.0 * h);
                let analytic = grads.get(which).data()[j];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(rel < 1e-4, "param {which}[{j}]: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let v = vocab(&["aa", "bb", "cc"]);
        let cfg = CbowConfig {
            dim: 4,
            epochs: 0,
            seed: 9,
            ..CbowConfig::default()
        };
        let out = train_cbow(&[vec![0, 1, 2, 1]], &v, &cfg).unwrap();
        let (rho, ctx) = init_cbow(3, 4, 9);
        assert_eq!(out.embeddings.rho(), &rho);
        assert_eq!(out.context.alpha_ctx, ctx);
        assert!(out.epoch_losses.is_empty());
        let half = 0.5 / 4.0;
        assert!(rho.data().iter().all(|x| x.abs() <= half));
    }

    #[test]
    fn training_errors() {
        let v = vocab(&["aa", "bb"]);
        assert!(matches!(
            train_cbow(&[vec![], vec![]], &v, &CbowConfig::default()),
            Err(EmbeddingError::EmptyCorpus)
        ));
        let cfg = CbowConfig {
            dim: 1,
            ..CbowConfig::default()
        };
        assert!(matches!(train_cbow(&[vec![0, 1]], &v, &cfg), Err(EmbeddingError::InvalidArgument(_))));
        assert!(matches!(
            train_cbow(&[vec![0, 5]], &v, &CbowConfig::default()),
            Err(EmbeddingError::InvalidArgument(_))
        ));
    }

    #[test]
    fn alternating_corpus_loss_decreases_every_epoch() {
        let v = vocab(&["aa", "bb"]);
        let seqs: Vec<Vec<usize>> = (0..20).map(|_| (0..30).map(|i| i % 2).collect()).collect();
        let cfg = CbowConfig {
            dim: 8,
            window: 1,
            epochs: 10,
            batch_size: 64,
            lr: 0.01,
            seed: 1,
        };
        let out = train_cbow(&seqs, &v, &cfg).unwrap();
        assert_eq!(out.epoch_losses.len(), 10);
        for w in out.epoch_losses.windows(2) {
            assert!(w[1] < w[0], "{:?}", out.epoch_losses);
        }
    }

    #[test]
    fn co_occurring_pairs_end_up_closer() {
        let v = vocab(&["pp", "qq", "rr", "ss"]);
        let mut rng = rng::stream(5, "pairs");
        let seqs: Vec<Vec<usize>> = (0..200)
            .map(|d| {
                let base = if d % 2 == 0 { 0 } else { 2 };
                (0..12).map(|_| base + rng.random_range(0..2)).collect()
            })
            .collect();
        let cfg = CbowConfig {
            dim: 10,
            window: 2,
            epochs: 5,
            batch_size: 64,
            lr: 0.01,
            seed: 2,
        };
        let out = train_cbow(&seqs, &v, &cfg).unwrap();
        let m = &out.embeddings;
        let pq = cosine(&m.column(0), &m.column(1));
        let pr = cosine(&m.column(0), &m.column(2));
        assert!(pq > pr, "cos(p,q)={pq} cos(p,r)={pr}");
    }

    #[test]
    fn load_examples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        fs::write(&path, "2 3\ncat 1 0 0\ndog 0 1 0\n").unwrap();
        let m = load_embeddings(&path, &vocab(&["cat", "dog"])).unwrap();
        assert_eq!(m.rho().shape(), &[3, 2]);
        assert_eq!(m.column(0), vec![1.0, 0.0, 0.0]);
        assert_eq!(m.column(1), vec![0.0, 1.0, 0.0]);

        let m = load_embeddings(&path, &vocab(&["dog"])).unwrap();
        assert_eq!(m.column(0), vec![0.0, 1.0, 0.0]);

        match load_embeddings(&path, &vocab(&["cat", "eel", "dog", "fox"])) {
            Err(EmbeddingError::MissingTerms(t)) => assert_eq!(t, vec!["eel", "fox"]),
            other => panic!("{other:?}"),
        }

        fs::write(&path, "3 3\ncat 1 0 0\ndog 0 1 0\n").unwrap();
        assert!(matches!(
            load_embeddings(&path, &vocab(&["cat", "dog"])),
            Err(EmbeddingError::DimensionMismatch(_))
        ));
        fs::write(&path, "2 3\ncat 1 0\ndog 0 1 0\n").unwrap();
        assert!(matches!(
            load_embeddings(&path, &vocab(&["cat", "dog"])),
            Err(EmbeddingError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn write_read_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let v = vocab(&["aa", "bb", "cc"]);
        let (rho, _) = init_cbow(3, 5, 4);
        let m = EmbeddingMatrix::new(rho.map(|x| x * 1e3 + 1e-9), v.terms().to_vec()).unwrap();
        m.write(&path).unwrap();
        let back = load_embeddings(&path, &v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn neighbor_examples() {
        let terms: Vec<String> = ["aa", "bb", "cc"].iter().map(|s| s.to_string()).collect();
        let m = EmbeddingMatrix::new(Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap(), terms.clone()).unwrap();
        let n = nearest_neighbors(&m, "aa", 1).unwrap();
        assert_eq!(n[0].0, "bb");

        let m = EmbeddingMatrix::new(Tensor::from_rows(&[vec![1.0, 0.9, 0.0], vec![0.0, 0.1, 1.0]]).unwrap(), terms.clone()).unwrap();
        let names: Vec<String> = nearest_neighbors(&m, "aa", 2).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(names, vec!["bb", "cc"]);
        assert!(matches!(nearest_neighbors(&m, "zz", 1), Err(EmbeddingError::UnknownTerm(_))));

        // ties resolved by id
        let m = EmbeddingMatrix::new(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]]).unwrap(), terms).unwrap();
        let names: Vec<String> = nearest_neighbors(&m, "aa", 2).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(names, vec!["bb", "cc"]);
    }

    #[test]
    fn neighbors_invariant_under_positive_column_rescaling() {
        let mut rng = rng::stream(8, "scale");
        let terms: Vec<String> = (0..12).map(|i| format!("t{i:02}")).collect();
        for _ in 0..20 {
            let rho = Tensor::matrix(4, 12, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let scales: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..10.0)).collect();
            let mut scaled = rho.clone();
            for l in 0..4 {
                for v in 0..12 {
                    scaled.data_mut()[l * 12 + v] *= scales[v];
                }
            }
            let a = EmbeddingMatrix::new(rho, terms.clone()).unwrap();
            let b = EmbeddingMatrix::new(scaled, terms.clone()).unwrap();
            let na: Vec<String> = nearest_neighbors(&a, "t03", 5).unwrap().into_iter().map(|p| p.0).collect();
            let nb: Vec<String> = nearest_neighbors(&b, "t03", 5).unwrap().into_iter().map(|p| p.0).collect();
            assert_eq!(na, nb);
        }
    }
}
