//! Topic coherence, diversity, quality and document completion.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BowDocument, CompletionPair};
use crate::etm::{word_likelihood, EtmError, EtmModel, TopicMatrix, LOG_FLOOR};

/// Number of top terms per topic scored by coherence.
pub const COHERENCE_TOP_N: usize = 10;
/// Number of top terms per topic scored by diversity.
pub const DIVERSITY_TOP_N: usize = 25;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("reference corpus is empty")]
    EmptyReference,
    #[error("term {0} is not covered by the co-occurrence statistics")]
    UnknownTerm(usize),
    #[error("co-occurrence statistics do not cover terms {0:?}")]
    MissingStats(Vec<usize>),
    #[error("vocabulary of {vocab_size} terms is smaller than the {required} top terms required")]
    VocabularyTooSmall { vocab_size: usize, required: usize },
    #[error("no completion pairs")]
    NoPairs,
    #[error("completion pair {0} has an empty held-out half")]
    EmptyHeldOut(usize),
    #[error(transparent)]
    Model(#[from] EtmError),
}

/// Document-presence counts over a reference corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceStats {
    doc_count: u64,
    counts: BTreeMap<usize, u64>,
    // keyed (i, j) with i < j
    joint: BTreeMap<(usize, usize), u64>,
}

impl CooccurrenceStats {
    pub fn doc_count(&self) -> u64 {
        self.doc_count
    }

    pub fn covers(&self, term: usize) -> bool {
        self.counts.contains_key(&term)
    }

    /// Documents containing `term`.
    pub fn count(&self, term: usize) -> Result<u64, MetricsError> {
        self.counts.get(&term).copied().ok_or(MetricsError::UnknownTerm(term))
    }

    /// Documents containing both terms.
    pub fn joint(&self, i: usize, j: usize) -> Result<u64, MetricsError> {
        let ci = self.count(i)?;
        self.count(j)?;
        if i == j {
            return Ok(ci);
        }
        let key = (i.min(j), i.max(j));
        Ok(self.joint.get(&key).copied().unwrap_or(0))
    }
}

/// Presence-based document counts for `candidates` and all their pairs.
pub fn build_cooccurrence(docs: &[BowDocument], candidates: &BTreeSet<usize>) -> Result<CooccurrenceStats, MetricsError> {
    if docs.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let mut counts: BTreeMap<usize, u64> = candidates.iter().map(|&t| (t, 0)).collect();
    let mut joint = BTreeMap::new();
    for doc in docs {
        let present: Vec<usize> = doc
            .iter()
            .filter(|&(id, c)| c > 0 && candidates.contains(&id))
            .map(|(id, _)| id)
            .collect();
        for (a, &i) in present.iter().enumerate() {
            *counts.get_mut(&i).expect("candidate") += 1;
            for &j in &present[a + 1..] {
                *joint.entry((i, j)).or_insert(0) += 1;
            }
        }
    }
    Ok(CooccurrenceStats {
        doc_count: docs.len() as u64,
        counts,
        joint,
    })
}

/// Normalized pointwise mutual information of two terms, in `[-1, 1]`.
///
/// Pairs that never co-occur score -1; a pair present in every document
/// scores 0.
pub fn npmi(stats: &CooccurrenceStats, i: usize, j: usize) -> Result<f64, MetricsError> {
    let joint = stats.joint(i, j)?;
    if joint == 0 {
        return Ok(-1.0);
    }
    let d = stats.doc_count as f64;
    if joint == stats.doc_count {
        return Ok(0.0);
    }
    let p_ij = joint as f64 / d;
    let p_i = stats.count(i)? as f64 / d;
    let p_j = stats.count(j)? as f64 / d;
    let f = (p_ij / (p_i * p_j)).ln() / -p_ij.ln();
    Ok(f.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    /// Mean over topics of the per-topic mean NPMI.
    pub tc: f64,
    pub per_topic: Vec<f64>,
    pub pairs_per_topic: usize,
}

fn require_vocab(beta: &TopicMatrix, required: usize) -> Result<(), MetricsError> {
    if beta.vocab_size() < required {
        return Err(MetricsError::VocabularyTooSmall {
            vocab_size: beta.vocab_size(),
            required,
        });
    }
    Ok(())
}

/// Every term in any topic's top-10 list; the candidate set for
/// [`build_cooccurrence`].
pub fn coherence_terms(beta: &TopicMatrix) -> BTreeSet<usize> {
    (0..beta.num_topics())
        .flat_map(|k| beta.top_terms(k, COHERENCE_TOP_N))
        .collect()
}

pub fn topic_coherence(beta: &TopicMatrix, stats: &CooccurrenceStats) -> Result<Coherence, MetricsError> {
    require_vocab(beta, COHERENCE_TOP_N)?;
    let missing: Vec<usize> = coherence_terms(beta).into_iter().filter(|&t| !stats.covers(t)).collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingStats(missing));
    }
    let mut per_topic = Vec::with_capacity(beta.num_topics());
    let mut pairs_per_topic = 0;
    for k in 0..beta.num_topics() {
        let top = beta.top_terms(k, COHERENCE_TOP_N);
        let mut total = 0.0;
        let mut pairs = 0;
        for a in 0..top.len() {
            for b in a + 1..top.len() {
                total += npmi(stats, top[a], top[b])?;
                pairs += 1;
            }
        }
        pairs_per_topic = pairs;
        per_topic.push(total / pairs as f64);
    }
    let tc = per_topic.iter().sum::<f64>() / per_topic.len() as f64;
    Ok(Coherence {
        tc,
        per_topic,
        pairs_per_topic,
    })
}

/// Fraction of distinct terms among all topics' top-25 lists.
pub fn topic_diversity(beta: &TopicMatrix) -> Result<f64, MetricsError> {
    require_vocab(beta, DIVERSITY_TOP_N)?;
    let k = beta.num_topics();
    let unique: BTreeSet<usize> = (0..k).flat_map(|t| beta.top_terms(t, DIVERSITY_TOP_N)).collect();
    Ok(unique.len() as f64 / (DIVERSITY_TOP_N * k) as f64)
}

pub fn topic_quality(coherence: f64, diversity: f64) -> f64 {
    coherence * diversity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    /// Mean log-likelihood per held-out token.
    pub loglik: f64,
    pub ppl: f64,
    /// Perplexity divided by the vocabulary size.
    pub normalized_ppl: f64,
    pub tokens: u64,
}

/// Document completion with topic proportions supplied by `infer`.
pub fn document_completion_with(
    beta: &TopicMatrix,
    pairs: &[CompletionPair],
    mut infer: impl FnMut(&BowDocument) -> Result<Vec<f64>, EtmError>,
) -> Result<Completion, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    let mut total = 0.0;
    let mut tokens = 0u64;
    for (i, pair) in pairs.iter().enumerate() {
        if pair.held_out.is_empty() {
            return Err(MetricsError::EmptyHeldOut(i));
        }
        let theta = infer(&pair.observed)?;
        for (v, c) in pair.held_out.iter() {
            let p = word_likelihood(&theta, beta, v).max(LOG_FLOOR);
            total += f64::from(c) * p.ln();
        }
        tokens += pair.held_out.len();
    }
    let loglik = total / tokens as f64;
    let ppl = (-loglik).exp();
    Ok(Completion {
        loglik,
        ppl,
        normalized_ppl: ppl / beta.vocab_size() as f64,
        tokens,
    })
}

/// Infers `theta` from each observed half with the encoder mean and scores
/// the held-out half.
pub fn document_completion(model: &EtmModel, pairs: &[CompletionPair]) -> Result<Completion, MetricsError> {
    let beta = model.topics();
    document_completion_with(&beta, pairs, |doc| model.infer_theta(doc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub coherence: f64,
    pub diversity: f64,
    pub quality: f64,
    pub completion_loglik: f64,
    pub completion_ppl: f64,
    pub normalized_ppl: f64,
}

impl MetricsReport {
    pub fn new(coherence: f64, diversity: f64, completion: &Completion) -> Self {
        Self {
            coherence,
            diversity,
            quality: topic_quality(coherence, diversity),
            completion_loglik: completion.loglik,
            completion_ppl: completion.ppl,
            normalized_ppl: completion.normalized_ppl,
        }
    }
}
