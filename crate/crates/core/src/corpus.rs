//! Text ingestion, vocabulary construction, bag-of-words documents and
//! train/validation/test splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no term satisfies the vocabulary thresholds")]
    EmptyVocabulary,
    #[error("not enough documents: {0}")]
    InsufficientDocuments(String),
    #[error("document has {0} tokens, at least 2 are required")]
    TooShort(u64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
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

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Indexed term list. Ids are dense and follow lexicographic term order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
    doc_freq: Vec<f64>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit term list (e.g. a vocabulary
    /// file). Document frequencies are unknown and reported as zero.
    pub fn from_terms(terms: Vec<String>) -> Result<Self, CorpusError> {
        let n = terms.len();
        Self::with_doc_freq(terms, vec![0.0; n])
    }

    fn with_doc_freq(terms: Vec<String>, doc_freq: Vec<f64>) -> Result<Self, CorpusError> {
        if terms.is_empty() {
            return Err(CorpusError::EmptyVocabulary);
        }
        let mut index = HashMap::with_capacity(terms.len());
        for (i, t) in terms.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::InvalidArgument(format!("duplicate term {t:?}")));
            }
        }
        Ok(Self {
            terms,
            index,
            doc_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term(&self, id: usize) -> Option<&str> {
        self.terms.get(id).map(String::as_str)
    }

    pub fn id(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    /// Fraction of documents containing each term, by id.
    pub fn doc_freq(&self) -> &[f64] {
        &self.doc_freq
    }

    /// Vocabulary file: one term per line, line number is the term id.
    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        for t in &self.terms {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let terms: Vec<String> = text.lines().map(str::to_owned).collect();
        if let Some(line) = terms.iter().position(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: line + 1,
                message: "vocabulary terms must be non-empty and contain no whitespace".into(),
            });
        }
        Self::from_terms(terms)
    }
}

/// Sparse term counts of one document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BowDocument {
    counts: BTreeMap<usize, u32>,
    total: u64,
}

impl BowDocument {
    /// Builds a document from `(term id, count)` pairs. Zero counts are
    /// dropped and repeated ids accumulate.
    pub fn from_counts(pairs: impl IntoIterator<Item = (usize, u32)>) -> Self {
        let mut counts = BTreeMap::new();
        for (id, c) in pairs {
            if c > 0 {
                *counts.entry(id).or_insert(0) += c;
            }
        }
        let total = counts.values().map(|&c| u64::from(c)).sum();
        Self { counts, total }
    }

    pub fn from_token_ids(ids: impl IntoIterator<Item = usize>) -> Self {
        Self::from_counts(ids.into_iter().map(|id| (id, 1)))
    }

    pub fn counts(&self) -> &BTreeMap<usize, u32> {
        &self.counts
    }

    pub fn count(&self, id: usize) -> u32 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    /// Total token count `N_d`.
    pub fn len(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    pub fn max_term_id(&self) -> Option<usize> {
        self.counts.keys().next_back().copied()
    }

    /// Token multiset in ascending term-id order.
    pub fn tokens(&self) -> Vec<usize> {
        self.iter()
            .flat_map(|(id, c)| std::iter::repeat_n(id, c as usize))
            .collect()
    }
}

/// Lowercased alphabetic tokens of length at least two, minus stop words.
pub fn tokenize(raw: &str, stopwords: Option<&HashSet<String>>) -> Vec<String> {
    raw.split(|c: char| !c.is_alphabetic())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .filter(|t| stopwords.is_none_or(|s| !s.contains(t)))
        .collect()
}

/// Keeps the terms appearing in at least `min_docs` documents and in at most
/// a `max_df` fraction of them.
pub fn build_vocabulary<S: AsRef<str>>(docs: &[Vec<S>], min_docs: usize, max_df: f64) -> Result<Vocabulary, CorpusError> {
    if min_docs < 1 {
        return Err(CorpusError::InvalidArgument("min_docs must be at least 1".into()));
    }
    if !(max_df > 0.0 && max_df <= 1.0) {
        return Err(CorpusError::InvalidArgument(format!("max_df must lie in (0, 1], got {max_df}")));
    }
    let mut doc_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        let unique: BTreeSet<&str> = doc.iter().map(AsRef::as_ref).collect();
        for t in unique {
            *doc_counts.entry(t).or_insert(0) += 1;
        }
    }
    let n_docs = docs.len() as f64;
    let mut terms = Vec::new();
    let mut freqs = Vec::new();
    for (term, count) in doc_counts {
        let df = count as f64 / n_docs;
        if count >= min_docs && df <= max_df {
            terms.push(term.to_owned());
            freqs.push(df);
        }
    }
    Vocabulary::with_doc_freq(terms, freqs)
}

/// Term ids of the in-vocabulary tokens, in their original order.
pub fn to_ids<S: AsRef<str>>(doc: &[S], vocab: &Vocabulary) -> Vec<usize> {
    doc.iter().filter_map(|t| vocab.id(t.as_ref())).collect()
}

/// Counts of in-vocabulary tokens; out-of-vocabulary tokens are dropped.
pub fn to_bow<S: AsRef<str>>(doc: &[S], vocab: &Vocabulary) -> BowDocument {
    BowDocument::from_token_ids(to_ids(doc, vocab))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.85,
            test: 0.10,
            validation: 0.05,
        }
    }
}

/// Train/validation/test partition. `*_ids` hold each document's index in
/// the input list passed to [`split_corpus`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitCorpus {
    pub train: Vec<BowDocument>,
    pub validation: Vec<BowDocument>,
    pub test: Vec<BowDocument>,
    pub train_ids: Vec<usize>,
    pub validation_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    /// Documents dropped from validation/test because they had fewer than
    /// two tokens.
    pub dropped_short: usize,
}

/// Shuffles the non-empty documents under `seed` and partitions them.
///
/// Split sizes are computed on the non-empty documents: `round(test * n)`,
/// `round(validation * n)` and the remainder for training. Documents with a
/// single token are then removed from validation and test.
pub fn split_corpus(docs: &[BowDocument], fractions: SplitFractions, seed: u64) -> Result<SplitCorpus, CorpusError> {
    let SplitFractions {
        train,
        test,
        validation,
    } = fractions;
    if !(train > 0.0 && test > 0.0 && validation > 0.0) || (train + test + validation - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidArgument(format!(
            "split fractions must be positive and sum to 1, got ({train}, {test}, {validation})"
        )));
    }
    let mut order: Vec<usize> = (0..docs.len()).filter(|&i| !docs[i].is_empty()).collect();
    let n = order.len();
    let n_test = (test * n as f64).round() as usize;
    let n_val = (validation * n as f64).round() as usize;
    if n_test == 0 || n_val == 0 || n_test + n_val >= n {
        return Err(CorpusError::InsufficientDocuments(format!(
            "{n} non-empty documents cannot fill all three splits"
        )));
    }
    order.shuffle(&mut rng::stream(seed, "split"));

    let mut out = SplitCorpus::default();
    let (test_part, rest) = order.split_at(n_test);
    let (val_part, train_part) = rest.split_at(n_val);
    for &i in train_part {
        out.train.push(docs[i].clone());
        out.train_ids.push(i);
    }
    for (part, docs_out, ids_out) in [
        (val_part, &mut out.validation, &mut out.validation_ids),
        (test_part, &mut out.test, &mut out.test_ids),
    ] {
        for &i in part {
            if docs[i].len() < 2 {
                out.dropped_short += 1;
            } else {
                docs_out.push(docs[i].clone());
                ids_out.push(i);
            }
        }
    }
    if out.validation.is_empty() || out.test.is_empty() {
        return Err(CorpusError::InsufficientDocuments(
            "validation or test split is empty after removing one-token documents".into(),
        ));
    }
    Ok(out)
}

/// Observed and held-out halves of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionPair {
    pub observed: BowDocument,
    pub held_out: BowDocument,
}

/// Shuffles the token multiset under `seed`; the first `ceil(N/2)` tokens
/// are observed and the rest held out.
pub fn completion_split(doc: &BowDocument, seed: u64) -> Result<CompletionPair, CorpusError> {
    if doc.len() < 2 {
        return Err(CorpusError::TooShort(doc.len()));
    }
    let mut tokens = doc.tokens();
    tokens.shuffle(&mut rng::stream(seed, "completion"));
    let cut = tokens.len().div_ceil(2);
    Ok(CompletionPair {
        observed: BowDocument::from_token_ids(tokens[..cut].iter().copied()),
        held_out: BowDocument::from_token_ids(tokens[cut..].iter().copied()),
    })
}

/// Reads a corpus: a file holds one document per line, a directory holds
/// one document per `.txt` file (visited in file-name order).
pub fn read_corpus(path: &Path) -> Result<Vec<String>, CorpusError> {
    let meta = fs::metadata(path).map_err(io_err(path))?;
    if meta.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt"))
            .collect();
        files.sort();
        files
            .iter()
            .map(|f| fs::read_to_string(f).map_err(io_err(f)))
            .collect()
    } else {
        let file = fs::File::open(path).map_err(io_err(path))?;
        BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(io_err(path))
    }
}

/// Stop-word list, one word per line; words are lowercased.
pub fn read_stopwords(path: &Path) -> Result<HashSet<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

#[derive(Serialize, Deserialize)]
struct BowRecord {
    id: usize,
    counts: BTreeMap<usize, u32>,
}

/// JSON lines, one `{"id": .., "counts": {"termid": count, ..}}` per document.
pub fn write_bow_jsonl(path: &Path, ids: &[usize], docs: &[BowDocument]) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for (&id, doc) in ids.iter().zip(docs) {
        let rec = BowRecord {
            id,
            counts: doc.counts.clone(),
        };
        let line = serde_json::to_string(&rec).expect("bow record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_bow_jsonl(path: &Path) -> Result<(Vec<usize>, Vec<BowDocument>), CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut ids = Vec::new();
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: BowRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        ids.push(rec.id);
        docs.push(BowDocument::from_counts(rec.counts));
    }
    Ok((ids, docs))
}
