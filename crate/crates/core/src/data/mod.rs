//! Corpus ingestion, vocabulary and unigram construction, federated
//! partitioning, and a synthetic corpus generator.

mod corpus;
mod partition;
mod synth;
mod vocab;

pub use corpus::{
    hash_label, ngram_windows, read_jsonl, tokenize, write_jsonl, FederatedCorpus, RawUser, UserData,
    LABEL_BUCKETS,
};
pub use partition::partition_dirichlet;
pub use synth::{synth_corpus, SynthConfig};
pub use vocab::{Vocabulary, BOS, BOS_TOKEN, UNK, UNK_TOKEN};
