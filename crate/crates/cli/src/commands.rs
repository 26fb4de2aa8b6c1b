use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use etm::corpus::{
    build_vocabulary, completion_split, read_bow_jsonl, read_corpus, read_stopwords, split_corpus, to_bow, to_ids,
    tokenize, write_bow_jsonl, BowDocument, SplitCorpus, SplitFractions, Vocabulary,
};
use etm::embeddings::{load_embeddings, nearest_neighbors, train_cbow, CbowConfig, EmbeddingMatrix};
use etm::etm::{load_checkpoint, save_checkpoint, train_with, EtmModel, Mode, TrainingConfig};
use etm::metrics::{
    build_cooccurrence, coherence_terms, document_completion, topic_coherence, topic_diversity, MetricsReport,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::{EmbeddingArgs, EvalArgs, Globals, NeighborsArgs, PreprocessArgs, TopicsArgs, TrainArgs};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const SEQUENCES_FILE: &str = "train_sequences.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const EMBEDDINGS_LOG: &str = "embeddings_log.jsonl";
pub const CHECKPOINT_FILE: &str = "model.etm";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";

fn require_file(path: &Path) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Config(format!("path does not exist: {}", path.display())))
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_error(path))
}

fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    write_text(path, &out)
}

fn data_dir(g: &Globals, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    Ok(g.file.get(flag, "data_dir")?.unwrap_or_else(|| g.out_dir.clone()))
}

fn checkpoint_path(g: &Globals, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    Ok(g.file
        .get(flag, "checkpoint")?
        .unwrap_or_else(|| g.out_dir.join(CHECKPOINT_FILE)))
}

fn read_docs(path: &Path) -> Result<Vec<BowDocument>, CliError> {
    Ok(read_bow_jsonl(path)?.1)
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    min_docs: usize,
    max_df: f64,
    stopwords: Option<String>,
    fractions: SplitFractions,
    documents: usize,
    empty_documents: usize,
    vocab_size: usize,
    train: usize,
    validation: usize,
    test: usize,
    dropped_short: usize,
    tokens_train: u64,
}

pub fn preprocess(g: &Globals, a: PreprocessArgs) -> Result<(), CliError> {
    let corpus = g
        .file
        .get(a.corpus, "corpus")?
        .ok_or_else(|| CliError::Config("--corpus is required".into()))?;
    let corpus = require_file(&corpus)?;
    let stopwords = g.file.get(a.stopwords, "stopwords")?.map(|p| require_file(&p)).transpose()?;
    let min_docs = g.file.get_or(a.min_docs, "min_docs", 2)?;
    let max_df = g.file.get_or(a.max_df, "max_df", 0.7)?;
    if min_docs < 1 {
        return Err(CliError::Config("--min-docs must be at least 1".into()));
    }
    if !(max_df > 0.0 && max_df <= 1.0) {
        return Err(CliError::Config(format!("--max-df must lie in (0, 1], got {max_df}")));
    }
    create_dir(&g.out_dir)?;

    let stop = stopwords.as_deref().map(read_stopwords).transpose()?;
    let raw = read_corpus(&corpus)?;
    let tokens: Vec<Vec<String>> = raw.iter().map(|d| tokenize(d, stop.as_ref())).collect();
    let vocab = build_vocabulary(&tokens, min_docs, max_df)?;
    let bows: Vec<BowDocument> = tokens.iter().map(|t| to_bow(t, &vocab)).collect();
    let fractions = SplitFractions::default();
    let split = split_corpus(&bows, fractions, g.seed)?;

    vocab.write(&g.out_dir.join(VOCAB_FILE))?;
    write_bow_jsonl(&g.out_dir.join(TRAIN_FILE), &split.train_ids, &split.train)?;
    write_bow_jsonl(&g.out_dir.join(VALID_FILE), &split.validation_ids, &split.validation)?;
    write_bow_jsonl(&g.out_dir.join(TEST_FILE), &split.test_ids, &split.test)?;

    let mut sequences = String::new();
    for &id in &split.train_ids {
        let ids: Vec<String> = to_ids(&tokens[id], &vocab).iter().map(usize::to_string).collect();
        sequences.push_str(&ids.join(" "));
        sequences.push('\n');
    }
    write_text(&g.out_dir.join(SEQUENCES_FILE), &sequences)?;

    let manifest = Manifest {
        seed: g.seed,
        min_docs,
        max_df,
        stopwords: stopwords.map(|p| p.display().to_string()),
        fractions,
        documents: bows.len(),
        empty_documents: bows.iter().filter(|d| d.is_empty()).count(),
        vocab_size: vocab.len(),
        train: split.train.len(),
        validation: split.validation.len(),
        test: split.test.len(),
        dropped_short: split.dropped_short,
        tokens_train: split.train.iter().map(BowDocument::len).sum(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&g.out_dir.join(MANIFEST_FILE), &(json.clone() + "\n"))?;
    println!("{json}");
    Ok(())
}

fn read_sequences(path: &Path, vocab_size: usize) -> Result<Vec<Vec<usize>>, CliError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| match t.parse::<usize>() {
                    Ok(id) if id < vocab_size => Ok(id),
                    _ => Err(CliError::Data(format!("{}:{}: bad term id {t:?}", path.display(), i + 1))),
                })
                .collect()
        })
        .collect()
}

#[derive(Serialize)]
struct EmbeddingEpoch {
    epoch: usize,
    loss: f64,
}

pub fn train_embeddings(g: &Globals, a: EmbeddingArgs) -> Result<(), CliError> {
    let dir = data_dir(g, a.data_dir)?;
    let vocab_path = require_file(&dir.join(VOCAB_FILE))?;
    let seq_path = require_file(&dir.join(SEQUENCES_FILE))?;
    let f = &g.file;
    let defaults = CbowConfig::default();
    let config = CbowConfig {
        dim: f.get_or(a.dim, "dim", defaults.dim)?,
        window: f.get_or(a.window, "window", defaults.window)?,
        epochs: f.get_or(a.epochs, "epochs", defaults.epochs)?,
        batch_size: f.get_or(a.batch_size, "batch_size", defaults.batch_size)?,
        lr: f.get_or(a.lr, "lr", defaults.lr)?,
        seed: g.seed,
    };
    create_dir(&g.out_dir)?;

    let vocab = Vocabulary::read(&vocab_path)?;
    let sequences = read_sequences(&seq_path, vocab.len())?;
    let fit = train_cbow(&sequences, &vocab, &config)?;
    fit.embeddings.write(&g.out_dir.join(EMBEDDINGS_FILE))?;
    let log: Vec<EmbeddingEpoch> = fit
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| EmbeddingEpoch { epoch: i + 1, loss })
        .collect();
    write_json_lines(&g.out_dir.join(EMBEDDINGS_LOG), &log)?;
    for row in &log {
        println!("{}", serde_json::to_string(row).expect("row serializes"));
    }
    Ok(())
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    match s {
        "labeled" => Ok(Mode::Labeled),
        "joint" => Ok(Mode::Joint),
        other => Err(CliError::Config(format!("mode must be labeled or joint, got {other:?}"))),
    }
}

fn parse_hidden(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("invalid hidden width {w:?}")))
        })
        .collect()
}

pub fn train(g: &Globals, a: TrainArgs) -> Result<(), CliError> {
    let dir = data_dir(g, a.data_dir)?;
    let vocab_path = require_file(&dir.join(VOCAB_FILE))?;
    let train_path = require_file(&dir.join(TRAIN_FILE))?;
    let valid_path = require_file(&dir.join(VALID_FILE))?;
    let f = &g.file;
    let d = TrainingConfig::default();
    let mode = parse_mode(&f.get_or(a.mode, "mode", "joint".to_owned())?)?;
    let emb_path = f.get(a.embeddings, "embeddings")?.map(|p| require_file(&p)).transpose()?;
    if mode == Mode::Labeled && emb_path.is_none() {
        return Err(CliError::Config("labeled mode requires --embeddings".into()));
    }
    let hidden = match f.get::<String>(a.hidden, "hidden")? {
        Some(s) => parse_hidden(&s)?,
        None => d.hidden.clone(),
    };
    let mut config = TrainingConfig {
        num_topics: f.get_or(a.num_topics, "num_topics", d.num_topics)?,
        embedding_dim: f.get_or(a.dim, "dim", d.embedding_dim)?,
        hidden,
        batch_size: f.get_or(a.batch_size, "batch_size", d.batch_size)?,
        lr: f.get_or(a.lr, "lr", d.lr)?,
        weight_decay: f.get_or(a.weight_decay, "weight_decay", d.weight_decay)?,
        epochs: f.get_or(a.epochs, "epochs", d.epochs)?,
        seed: g.seed,
        mode,
        patience: f.get(a.patience, "patience")?,
    };
    config.validate()?;
    create_dir(&g.out_dir)?;

    let vocab = Vocabulary::read(&vocab_path)?;
    let embeddings = emb_path.as_deref().map(|p| load_embeddings(p, &vocab)).transpose()?;
    if let Some(e) = &embeddings {
        config.embedding_dim = e.dim();
    }
    let data = SplitCorpus {
        train: read_docs(&train_path)?,
        validation: read_docs(&valid_path)?,
        ..SplitCorpus::default()
    };
    check_term_ids(data.train.iter().chain(&data.validation), vocab.len())?;

    let mut model = EtmModel::new(config, vocab.len(), embeddings.as_ref())?;
    let log_path = g.out_dir.join(TRAIN_LOG);
    let file = fs::File::create(&log_path).map_err(io_error(&log_path))?;
    let mut log = BufWriter::new(file);
    let mut write_err = None;
    let result = train_with(&mut model, &data, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(io_error(&log_path)(e));
    }
    result?;
    save_checkpoint(&model, &g.out_dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn check_term_ids<'a>(docs: impl Iterator<Item = &'a BowDocument>, vocab_size: usize) -> Result<(), CliError> {
    for doc in docs {
        if let Some(id) = doc.max_term_id().filter(|&id| id >= vocab_size) {
            return Err(CliError::Data(format!("term id {id} outside vocabulary of {vocab_size} terms")));
        }
    }
    Ok(())
}

fn load_model(g: &Globals, checkpoint: Option<PathBuf>, vocab: &Vocabulary) -> Result<EtmModel, CliError> {
    let path = require_file(&checkpoint_path(g, checkpoint)?)?;
    let model = load_checkpoint(&path)?;
    if model.vocab_size() != vocab.len() {
        return Err(CliError::Data(format!(
            "checkpoint has {} terms but the vocabulary has {}",
            model.vocab_size(),
            vocab.len()
        )));
    }
    Ok(model)
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(flatten)]
    metrics: MetricsReport,
    /// Normalized perplexity divided by coherence.
    ppl_coherence_ratio: Option<f64>,
    pairs_per_topic: usize,
    heldout_tokens: u64,
    test_documents: usize,
    num_topics: usize,
    vocab_size: usize,
    vocab_sha256: String,
    seed: u64,
}

pub fn eval(g: &Globals, a: EvalArgs) -> Result<(), CliError> {
    let dir = data_dir(g, a.data_dir)?;
    let vocab_path = require_file(&dir.join(VOCAB_FILE))?;
    let train_path = require_file(&dir.join(TRAIN_FILE))?;
    let test_path = require_file(&dir.join(TEST_FILE))?;
    let checkpoint = require_file(&checkpoint_path(g, a.checkpoint)?)?;
    create_dir(&g.out_dir)?;

    let vocab_bytes = fs::read(&vocab_path).map_err(io_error(&vocab_path))?;
    let vocab = Vocabulary::read(&vocab_path)?;
    let model = load_model(g, Some(checkpoint), &vocab)?;
    let reference = read_docs(&train_path)?;
    let test = read_docs(&test_path)?;
    check_term_ids(reference.iter().chain(&test), vocab.len())?;

    let beta = model.topics();
    let stats = build_cooccurrence(&reference, &coherence_terms(&beta))?;
    let coherence = topic_coherence(&beta, &stats)?;
    let diversity = topic_diversity(&beta)?;
    let pairs = test
        .iter()
        .enumerate()
        .filter(|(_, d)| d.len() >= 2)
        .map(|(i, d)| completion_split(d, g.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let completion = document_completion(&model, &pairs)?;
    let metrics = MetricsReport::new(coherence.tc, diversity, &completion);
    let report = EvalReport {
        ppl_coherence_ratio: (metrics.coherence != 0.0).then(|| metrics.normalized_ppl / metrics.coherence),
        metrics,
        pairs_per_topic: coherence.pairs_per_topic,
        heldout_tokens: completion.tokens,
        test_documents: pairs.len(),
        num_topics: model.num_topics(),
        vocab_size: vocab.len(),
        vocab_sha256: format!("{:x}", Sha256::digest(&vocab_bytes)),
        seed: g.seed,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&g.out_dir.join(REPORT_FILE), &(json.clone() + "\n"))?;
    println!("{json}");
    Ok(())
}

pub fn topics(g: &Globals, a: TopicsArgs) -> Result<(), CliError> {
    let dir = data_dir(g, a.data_dir)?;
    let vocab_path = require_file(&dir.join(VOCAB_FILE))?;
    let train_path = require_file(&dir.join(TRAIN_FILE))?;
    let top_n = g.file.get_or(a.top_n, "top_n", 10)?;
    let vocab = Vocabulary::read(&vocab_path)?;
    let model = load_model(g, a.checkpoint, &vocab)?;
    let docs = read_docs(&train_path)?;
    check_term_ids(docs.iter(), vocab.len())?;

    let usage = model.topic_usage(&docs)?;
    let beta = model.topics();
    let mut order: Vec<usize> = (0..usage.len()).collect();
    order.sort_by(|&x, &y| usage[y].total_cmp(&usage[x]).then(x.cmp(&y)));
    order.truncate(a.limit.unwrap_or(order.len()));
    for k in order {
        let words: Vec<&str> = beta
            .top_terms(k, top_n)
            .into_iter()
            .map(|v| vocab.term(v).expect("id within vocabulary"))
            .collect();
        println!("topic {k:>3}  {:.4}  {}", usage[k], words.join(" "));
    }
    Ok(())
}

pub fn neighbors(g: &Globals, a: NeighborsArgs) -> Result<(), CliError> {
    let k = g.file.get_or(a.k, "k", 10)?;
    let matrix = match g.file.get(a.embeddings, "embeddings")? {
        Some(path) => {
            let path = require_file(&path)?;
            let dir = data_dir(g, a.data_dir)?;
            let vocab = Vocabulary::read(&require_file(&dir.join(VOCAB_FILE))?)?;
            load_embeddings(&path, &vocab)?
        }
        None => {
            let dir = data_dir(g, a.data_dir)?;
            let vocab = Vocabulary::read(&require_file(&dir.join(VOCAB_FILE))?)?;
            let model = load_model(g, a.checkpoint, &vocab)?;
            EmbeddingMatrix::new(model.rho, vocab.terms().to_vec())?
        }
    };
    for (term, cos) in nearest_neighbors(&matrix, &a.term, k)? {
        println!("{term}\t{cos:.6}");
    }
    Ok(())
}
