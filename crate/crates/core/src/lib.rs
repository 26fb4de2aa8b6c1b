//! Embedded topic model: corpus preprocessing, CBOW word embeddings,
//! amortized variational inference and topic-quality metrics.

pub mod rng;
pub mod tensorcore;
pub mod corpus;
pub mod embeddings;
pub mod etm;
pub mod metrics;
