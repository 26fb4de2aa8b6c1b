//! The embedded topic model.
//!
//! Topics are `beta_k = softmax(rho^T alpha_k)` over the vocabulary, with
//! word embeddings `rho` (`L x V`) and topic embeddings `alpha` (`K x L`).
//! Topic proportions are logistic-normal, `theta_d = softmax(delta_d)` with
//! `delta_d ~ N(0, I)`. Inference is amortized: an encoder maps the
//! normalized bag of words to the mean and log-variance of a diagonal
//! Gaussian over `delta_d`, and everything is fit by maximizing a
//! reparameterized, subsampled ELBO with Adam.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BowDocument, SplitCorpus};
use crate::embeddings::EmbeddingMatrix;
use crate::rng;
use crate::tensorcore::{
    affine, gaussian_kl_diag, relu, softmax, softmax_rows, AdamConfig, AdamState, Graph, Tensor, TensorError, Var,
};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EtmError {
    #[error("document has no tokens")]
    EmptyDocument,
    #[error("minibatch is empty")]
    EmptyMinibatch,
    #[error("term id {id} outside vocabulary of size {vocab_size}")]
    TermOutOfRange { id: usize, vocab_size: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {op} at iteration {iteration}")]
    NonFinite { iteration: u64, op: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Word embeddings are fixed (pre-fitted).
    Labeled,
    /// Word embeddings are learned with the rest of the model.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub num_topics: usize,
    pub embedding_dim: usize,
    /// Widths of the encoder's hidden layers.
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Decoupled weight decay on the encoder parameters.
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Stop when the validation ELBO has not improved for this many epochs.
    pub patience: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            num_topics: 50,
            embedding_dim: 300,
            hidden: vec![800, 800, 800],
            batch_size: 1000,
            lr: 0.002,
            weight_decay: 1.2e-6,
            epochs: 100,
            seed: 0,
            mode: Mode::Joint,
            patience: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), EtmError> {
        let bad = |m: &str| Err(EtmError::InvalidConfig(m.to_owned()));
        if self.num_topics < 2 {
            return bad("at least two topics are required");
        }
        if self.embedding_dim < 1 {
            return bad("embedding dimension must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive");
        }
        Ok(())
    }
}

/// Fully connected layer `x W + b`, `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |_| rng.random_range(-bound..bound);
        let weight = Tensor::matrix(fan_in, fan_out, (0..fan_in * fan_out).map(&mut draw).collect()).expect("shape");
        let bias = Tensor::vector((0..fan_out).map(&mut draw).collect());
        Self { weight, bias }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        affine(x, &self.weight, &self.bias)
    }
}

/// Inference network: ReLU hidden layers followed by linear mean and
/// log-variance heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub hidden: Vec<Linear>,
    pub mu_head: Linear,
    pub log_var_head: Linear,
}

impl Encoder {
    fn init(input: usize, widths: &[usize], output: usize, rng: &mut impl Rng) -> Self {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for &w in widths {
            hidden.push(Linear::init(fan_in, w, rng));
            fan_in = w;
        }
        Self {
            hidden,
            mu_head: Linear::init(fan_in, output, rng),
            log_var_head: Linear::init(fan_in, output, rng),
        }
    }

    /// All-zero encoder; maps every input to `mu = 0`, `log_var = 0`.
    pub fn zeros(input: usize, widths: &[usize], output: usize) -> Self {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for &w in widths {
            hidden.push(Linear::zeros(fan_in, w));
            fan_in = w;
        }
        Self {
            hidden,
            mu_head: Linear::zeros(fan_in, output),
            log_var_head: Linear::zeros(fan_in, output),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.hidden.iter().chain([&self.mu_head, &self.log_var_head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.hidden
            .iter_mut()
            .chain([&mut self.mu_head, &mut self.log_var_head])
    }

    pub fn widths(&self) -> Vec<usize> {
        self.hidden.iter().map(|l| l.weight.cols()).collect()
    }

    /// `(mu, log_var)` for a batch of normalized inputs (`B x V`).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        let mut h = x.clone();
        for layer in &self.hidden {
            h = relu(&layer.forward(&h)?);
        }
        Ok((self.mu_head.forward(&h)?, self.log_var_head.forward(&h)?))
    }
}

/// Variational posterior over `delta_d`: mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// `K x V` matrix of per-topic word distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicMatrix {
    beta: Tensor,
}

impl TopicMatrix {
    pub fn new(beta: Tensor) -> Self {
        Self { beta }
    }

    pub fn num_topics(&self) -> usize {
        self.beta.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.beta.cols()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.beta.row(k)
    }

    pub fn get(&self, k: usize, v: usize) -> f64 {
        self.beta.get(k, v)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.beta
    }

    /// The `n` most probable term ids of topic `k`; ties go to the lower id.
    pub fn top_terms(&self, k: usize, n: usize) -> Vec<usize> {
        let row = self.row(k);
        let mut ids: Vec<usize> = (0..row.len()).collect();
        ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        ids.truncate(n);
        ids
    }
}

/// `sum_k theta_k beta_kv`: probability of term `v` with the topic
/// assignment marginalized out.
pub fn word_likelihood(theta: &[f64], beta: &TopicMatrix, v: usize) -> f64 {
    theta.iter().enumerate().map(|(k, &t)| t * beta.get(k, v)).sum()
}

/// Dense bag-of-words normalized by the document length.
pub fn normalize_bow(doc: &BowDocument, vocab_size: usize) -> Result<Vec<f64>, EtmError> {
    if doc.is_empty() {
        return Err(EtmError::EmptyDocument);
    }
    let n = doc.len() as f64;
    let mut x = vec![0.0; vocab_size];
    for (id, c) in doc.iter() {
        if id >= vocab_size {
            return Err(EtmError::TermOutOfRange { id, vocab_size });
        }
        x[id] = f64::from(c) / n;
    }
    Ok(x)
}

fn batch_inputs(docs: &[&BowDocument], vocab_size: usize) -> Result<(Tensor, Tensor), EtmError> {
    let b = docs.len();
    let mut x = Vec::with_capacity(b * vocab_size);
    let mut counts = vec![0.0; b * vocab_size];
    for (row, doc) in docs.iter().enumerate() {
        x.extend(normalize_bow(doc, vocab_size)?);
        for (id, c) in doc.iter() {
            counts[row * vocab_size + id] = f64::from(c);
        }
    }
    Ok((
        Tensor::matrix(b, vocab_size, x)?,
        Tensor::matrix(b, vocab_size, counts)?,
    ))
}

/// Value of a minibatch ELBO estimate and its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    /// `(D / |B|) * (log_likelihood - kl)`.
    pub elbo: f64,
    /// Unscaled sum over the minibatch of `count * log(theta^T beta)`.
    pub log_likelihood: f64,
    /// Unscaled sum of per-document KL terms.
    pub kl: f64,
    pub per_document_kl: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct ElboNodes {
    elbo: Var,
    log_likelihood: Var,
    kl: Var,
    mu: Var,
    log_var: Var,
}

/// Model parameters as recorded on a graph, in [`EtmModel::params_mut`]
/// order.
struct ParamVars {
    rho: Var,
    alpha: Var,
    encoder: Vec<(Var, Var)>,
    trainable: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtmModel {
    pub rho: Tensor,
    pub alpha: Tensor,
    pub encoder: Encoder,
    pub config: TrainingConfig,
}

impl EtmModel {
    /// Fresh model for a vocabulary of `vocab_size` terms. Labeled mode
    /// requires `embeddings`; in joint mode they are used as the starting
    /// point when given.
    pub fn new(config: TrainingConfig, vocab_size: usize, embeddings: Option<&EmbeddingMatrix>) -> Result<Self, EtmError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(EtmError::InvalidConfig("vocabulary is empty".into()));
        }
        let mut rng = rng::stream(config.seed, "init");
        let init = Normal::new(0.0, 0.02).expect("valid normal");
        let k = config.num_topics;

        let rho = match (config.mode, embeddings) {
            (_, Some(e)) => {
                if e.vocab_size() != vocab_size || e.dim() != config.embedding_dim {
                    return Err(EtmError::InvalidConfig(format!(
                        "embeddings are {}x{}, expected {}x{vocab_size}",
                        e.dim(),
                        e.vocab_size(),
                        config.embedding_dim
                    )));
                }
                e.rho().clone()
            }
            (Mode::Labeled, None) => {
                return Err(EtmError::InvalidConfig("labeled mode requires pre-fitted embeddings".into()));
            }
            (Mode::Joint, None) => {
                let l = config.embedding_dim;
                Tensor::matrix(l, vocab_size, (0..l * vocab_size).map(|_| init.sample(&mut rng)).collect())?
            }
        };
        let l = rho.rows();
        let alpha = Tensor::matrix(k, l, (0..k * l).map(|_| init.sample(&mut rng)).collect())?;
        let encoder = Encoder::init(vocab_size, &config.hidden, k, &mut rng);
        Ok(Self {
            rho,
            alpha,
            encoder,
            config,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.rho.cols()
    }

    pub fn num_topics(&self) -> usize {
        self.alpha.rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.rho.rows()
    }

    pub fn rho_trainable(&self) -> bool {
        self.config.mode == Mode::Joint
    }

    /// Trainable parameters: `alpha`, then `rho` in joint mode, then the
    /// encoder layers (weight, bias) in order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.alpha];
        if self.config.mode == Mode::Joint {
            out.push(&mut self.rho);
        }
        for layer in self.encoder.layers_mut() {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    fn decay_mask(&self) -> Vec<bool> {
        let model_params = if self.rho_trainable() { 2 } else { 1 };
        let n_enc = 2 * (self.encoder.hidden.len() + 2);
        std::iter::repeat_n(false, model_params)
            .chain(std::iter::repeat_n(true, n_enc))
            .collect()
    }

    pub fn topics(&self) -> TopicMatrix {
        let logits = self.alpha.matmul(&self.rho).expect("alpha and rho share L");
        TopicMatrix::new(softmax_rows(&logits).expect("finite parameters"))
    }

    pub fn encode(&self, x: &[f64]) -> Result<Posterior, EtmError> {
        if x.len() != self.vocab_size() {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                left: vec![x.len()],
                right: vec![self.vocab_size()],
            }
            .into());
        }
        let (mu, log_var) = self.encoder.forward(&Tensor::vector(x.to_vec()))?;
        Ok(Posterior {
            mu: mu.into_data(),
            log_var: log_var.into_data(),
        })
    }

    /// `softmax(mu_d)` from the encoder, no sampling.
    pub fn infer_theta(&self, doc: &BowDocument) -> Result<Vec<f64>, EtmError> {
        let post = self.encode(&normalize_bow(doc, self.vocab_size())?)?;
        Ok(softmax(&post.mu)?)
    }

    /// Mean of `infer_theta` over `docs`, skipping empty ones.
    pub fn topic_usage(&self, docs: &[BowDocument]) -> Result<Vec<f64>, EtmError> {
        let mut usage = vec![0.0; self.num_topics()];
        let mut n = 0usize;
        for doc in docs.iter().filter(|d| !d.is_empty()) {
            for (u, t) in usage.iter_mut().zip(self.infer_theta(doc)?) {
                *u += t;
            }
            n += 1;
        }
        if n > 0 {
            for u in &mut usage {
                *u /= n as f64;
            }
        }
        Ok(usage)
    }

    fn record_params(&self, g: &mut Graph) -> ParamVars {
        let alpha = g.param(self.alpha.clone());
        let mut trainable = vec![alpha];
        let rho = if self.rho_trainable() {
            let r = g.param(self.rho.clone());
            trainable.push(r);
            r
        } else {
            g.constant(self.rho.clone())
        };
        let mut encoder = Vec::new();
        for layer in self.encoder.layers() {
            let w = g.param(layer.weight.clone());
            let b = g.param(layer.bias.clone());
            trainable.push(w);
            trainable.push(b);
            encoder.push((w, b));
        }
        ParamVars {
            rho,
            alpha,
            encoder,
            trainable,
        }
    }

    fn record_elbo(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        docs: &[&BowDocument],
        d_total: usize,
        eps: &Tensor,
    ) -> Result<ElboNodes, EtmError> {
        if docs.is_empty() {
            return Err(EtmError::EmptyMinibatch);
        }
        let k = self.num_topics();
        if eps.rows() != docs.len() || eps.cols() != k {
            return Err(TensorError::ShapeMismatch {
                op: "elbo eps",
                left: eps.shape().to_vec(),
                right: vec![docs.len(), k],
            }
            .into());
        }
        let (x, counts) = batch_inputs(docs, self.vocab_size())?;
        let x = g.constant(x);
        let counts = g.constant(counts);
        let eps = g.constant(eps.clone());

        let n_hidden = self.encoder.hidden.len();
        let mut h = x;
        for &(w, b) in &pv.encoder[..n_hidden] {
            let a = g.affine(h, w, b)?;
            h = g.relu(a)?;
        }
        let (mw, mb) = pv.encoder[n_hidden];
        let (lw, lb) = pv.encoder[n_hidden + 1];
        let mu = g.affine(h, mw, mb)?;
        let log_var = g.affine(h, lw, lb)?;

        let delta = g.reparam_sample(mu, log_var, eps)?;
        let theta = g.softmax_rows(delta)?;
        let logits = g.matmul(pv.alpha, pv.rho)?;
        let beta = g.softmax_rows(logits)?;
        let word_probs = g.matmul(theta, beta)?;
        let log_probs = g.log_floor(word_probs, LOG_FLOOR)?;
        let weighted = g.mul(log_probs, counts)?;
        let log_likelihood = g.sum(weighted)?;
        let kl = g.gaussian_kl_diag(mu, log_var)?;
        let diff = g.sub(log_likelihood, kl)?;
        let elbo = g.scale(diff, d_total as f64 / docs.len() as f64)?;
        Ok(ElboNodes {
            elbo,
            log_likelihood,
            kl,
            mu,
            log_var,
        })
    }

    fn estimate(g: &Graph, nodes: &ElboNodes) -> Result<ElboEstimate, EtmError> {
        let mu = g.value(nodes.mu);
        let lv = g.value(nodes.log_var);
        let per_document_kl = (0..mu.rows())
            .map(|r| gaussian_kl_diag(mu.row(r), lv.row(r)))
            .collect::<Result<_, _>>()?;
        Ok(ElboEstimate {
            elbo: g.scalar(nodes.elbo),
            log_likelihood: g.scalar(nodes.log_likelihood),
            kl: g.scalar(nodes.kl),
            per_document_kl,
        })
    }

    /// Reparameterized ELBO estimate on a minibatch, scaled by
    /// `d_total / |B|`. Row `d` of `eps` (`|B| x K`) is the standard-normal
    /// draw for document `d`.
    pub fn elbo_minibatch(&self, docs: &[&BowDocument], d_total: usize, eps: &Tensor) -> Result<ElboEstimate, EtmError> {
        let mut g = Graph::new();
        let pv = self.record_params(&mut g);
        let nodes = self.record_elbo(&mut g, &pv, docs, d_total, eps)?;
        Self::estimate(&g, &nodes)
    }

    /// ELBO estimate together with the gradient of `-ELBO` for each tensor
    /// of [`EtmModel::params_mut`], in the same order.
    pub fn elbo_gradients(
        &self,
        docs: &[&BowDocument],
        d_total: usize,
        eps: &Tensor,
    ) -> Result<(ElboEstimate, Vec<Tensor>), EtmError> {
        let mut g = Graph::new();
        let pv = self.record_params(&mut g);
        let nodes = self.record_elbo(&mut g, &pv, docs, d_total, eps)?;
        let loss = g.scale(nodes.elbo, -1.0)?;
        let grads = g.backward(loss, &pv.trainable)?;
        Ok((Self::estimate(&g, &nodes)?, grads.into_vec()))
    }
}

/// Standard-normal draws, `rows x cols`.
pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-document ELBO over the epoch's minibatches.
    pub elbo: f64,
    /// Mean per-document KL term.
    pub kl: f64,
    pub val_elbo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub iterations: u64,
}

fn tag_iteration(iteration: u64) -> impl Fn(EtmError) -> EtmError {
    move |e| match e {
        EtmError::Tensor(TensorError::NonFinite { op }) => EtmError::NonFinite { iteration, op },
        other => other,
    }
}

/// Mean per-document ELBO over `docs`, with fixed noise so that successive
/// epochs are comparable.
pub fn mean_elbo(model: &EtmModel, docs: &[BowDocument], seed: u64) -> Result<f64, EtmError> {
    if docs.is_empty() {
        return Err(EtmError::EmptyMinibatch);
    }
    let mut rng = rng::stream(seed, "val-eps");
    let mut total = 0.0;
    for chunk in docs.chunks(model.config.batch_size.max(1)) {
        let refs: Vec<&BowDocument> = chunk.iter().collect();
        let eps = standard_normal(refs.len(), model.num_topics(), &mut rng);
        let est = model.elbo_minibatch(&refs, refs.len(), &eps)?;
        total += est.elbo;
    }
    Ok(total / docs.len() as f64)
}

/// Fits `model` on `data.train` following the stochastic amortized
/// procedure: per minibatch, sample one `delta_d` per document, estimate the
/// scaled ELBO, backpropagate, and take one Adam step on `alpha`, the
/// encoder, and (joint mode) `rho`.
pub fn train(model: &mut EtmModel, data: &SplitCorpus) -> Result<TrainReport, EtmError> {
    train_with(model, data, |_| {})
}

/// [`train`] with a callback invoked after each epoch.
pub fn train_with(
    model: &mut EtmModel,
    data: &SplitCorpus,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport, EtmError> {
    model.config.validate()?;
    let cfg = model.config.clone();
    let docs: Vec<&BowDocument> = data.train.iter().filter(|d| !d.is_empty()).collect();
    let mut report = TrainReport {
        trace: Vec::with_capacity(cfg.epochs),
        stopped_early: false,
        iterations: 0,
    };
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if docs.is_empty() {
        return Err(EtmError::EmptyMinibatch);
    }
    let d_total = docs.len();
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = {
        let decay = model.decay_mask();
        let params = model.params_mut();
        let refs: Vec<&Tensor> = params.iter().map(|p| &**p).collect();
        AdamState::new(adam_cfg, &refs, decay)
    };

    let mut order: Vec<usize> = (0..d_total).collect();
    let mut best_val = f64::NEG_INFINITY;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::indexed_stream(cfg.seed, "shuffle", epoch as u64));
        let mut elbo_sum = 0.0;
        let mut kl_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let iteration = report.iterations;
            let batch: Vec<&BowDocument> = chunk.iter().map(|&i| docs[i]).collect();
            let mut rng = rng::indexed_stream(cfg.seed, "eps", iteration);
            let eps = standard_normal(batch.len(), model.num_topics(), &mut rng);
            let (est, grads) = model
                .elbo_gradients(&batch, d_total, &eps)
                .map_err(tag_iteration(iteration))?;
            elbo_sum += est.log_likelihood - est.kl;
            kl_sum += est.kl;
            adam.step(&mut model.params_mut(), &grads)
                .map_err(|e| tag_iteration(iteration)(e.into()))?;
            report.iterations += 1;
        }
        let val_elbo = if data.validation.is_empty() {
            None
        } else {
            Some(mean_elbo(model, &data.validation, cfg.seed).map_err(tag_iteration(report.iterations))?)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            elbo: elbo_sum / d_total as f64,
            kl: kl_sum / d_total as f64,
            val_elbo,
        };
        on_epoch(&record);
        report.trace.push(record);

        if let (Some(patience), Some(v)) = (cfg.patience, val_elbo) {
            if v > best_val {
                best_val = v;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(report)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ETMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint, all integers and floats little-endian:
///
/// ```text
/// magic "ETMCKPT\0" | version u32
/// V u64 | K u64 | L u64 | n_hidden u64 | hidden widths u64 * n_hidden
/// mode u8 (0 labeled, 1 joint)
/// batch_size u64 | epochs u64 | seed u64 | patience u64 (0 = none)
/// lr f64 | weight_decay f64
/// rho (L x V) | alpha (K x L)
/// per hidden layer: weight, bias | mu head: weight, bias | log-var head: weight, bias
/// ```
///
/// Matrices are stored row-major as `f64`.
pub fn save_checkpoint(model: &EtmModel, path: &Path) -> Result<(), EtmError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let widths = model.encoder.widths();
    let header = [
        model.vocab_size(),
        model.num_topics(),
        model.embedding_dim(),
        widths.len(),
    ];
    for v in header.iter().chain(&widths) {
        buf.extend_from_slice(&(*v as u64).to_le_bytes());
    }
    buf.push(match model.config.mode {
        Mode::Labeled => 0,
        Mode::Joint => 1,
    });
    let cfg = &model.config;
    for v in [
        cfg.batch_size as u64,
        cfg.epochs as u64,
        cfg.seed,
        cfg.patience.unwrap_or(0) as u64,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&cfg.lr.to_le_bytes());
    buf.extend_from_slice(&cfg.weight_decay.to_le_bytes());

    let mut push = |t: &Tensor| {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    push(&model.rho);
    push(&model.alpha);
    for layer in model.encoder.layers() {
        push(&layer.weight);
        push(&layer.bias);
    }
    fs::write(path, buf).map_err(|source| EtmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], EtmError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EtmError::CorruptFile(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, EtmError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn size(&mut self) -> Result<usize, EtmError> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len() * 8)
            .ok_or_else(|| EtmError::CorruptFile(format!("implausible dimension {v}")))
    }

    fn f64(&mut self) -> Result<f64, EtmError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor, EtmError> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| EtmError::CorruptFile("overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<EtmModel, EtmError> {
    let bytes = fs::read(path).map_err(|source| EtmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(EtmError::CorruptFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(EtmError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let v = r.size()?;
    let k = r.size()?;
    let l = r.size()?;
    let n_hidden = r.size()?;
    let widths = (0..n_hidden).map(|_| r.size()).collect::<Result<Vec<_>, _>>()?;
    let mode = match r.take(1)?[0] {
        0 => Mode::Labeled,
        1 => Mode::Joint,
        m => return Err(EtmError::CorruptFile(format!("unknown mode {m}"))),
    };
    let batch_size = r.size()?;
    let epochs = r.size()?;
    let seed = r.u64()?;
    let patience = match r.size()? {
        0 => None,
        p => Some(p),
    };
    let lr = r.f64()?;
    let weight_decay = r.f64()?;

    let rho = r.tensor(&[l, v])?;
    let alpha = r.tensor(&[k, l])?;
    let mut read_linear = |fan_in: usize, fan_out: usize| -> Result<Linear, EtmError> {
        Ok(Linear {
            weight: r.tensor(&[fan_in, fan_out])?,
            bias: r.tensor(&[fan_out])?,
        })
    };
    let mut hidden = Vec::with_capacity(n_hidden);
    let mut fan_in = v;
    for &w in &widths {
        hidden.push(read_linear(fan_in, w)?);
        fan_in = w;
    }
    let mu_head = read_linear(fan_in, k)?;
    let log_var_head = read_linear(fan_in, k)?;
    if r.pos != bytes.len() {
        return Err(EtmError::CorruptFile(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let config = TrainingConfig {
        num_topics: k,
        embedding_dim: l,
        hidden: widths,
        batch_size,
        lr,
        weight_decay,
        epochs,
        seed,
        mode,
        patience,
    };
    config.validate().map_err(|e| EtmError::CorruptFile(e.to_string()))?;
    Ok(EtmModel {
        rho,
        alpha,
        encoder: Encoder {
            hidden,
            mu_head,
            log_var_head,
        },
        config,
    })
}
