use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, BOS};
use crate::error::{Error, Result};
use crate::model::Example;

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawUser {
    pub user_id: String,
    pub sentences: Vec<String>,
}

/// Whitespace split, optionally lowercased.
pub fn tokenize(sentence: &str, lowercase: bool) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RawUser>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut users = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let user: RawUser = serde_json::from_str(&line)
            .map_err(|e| Error::format("corpus", format!("line {}: {e}", n + 1)))?;
        users.push(user);
    }
    Ok(users)
}

pub fn write_jsonl(path: &Path, users: &[RawUser]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in users {
        serde_json::to_writer(&mut f, u)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// One client's token-id sentences with a coarse label per sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct UserData {
    pub user_id: String,
    pub sentences: Vec<Vec<u32>>,
    /// Topic for synthetic data, first-token hash bucket otherwise.
    pub labels: Vec<usize>,
}

impl UserData {
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

/// Number of hash buckets used to label real text.
pub const LABEL_BUCKETS: usize = 32;

/// FNV-1a bucket of the sentence's first token.
pub fn hash_label(sentence: &[u32]) -> usize {
    let first = sentence.first().copied().unwrap_or(0);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in first.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % LABEL_BUCKETS as u64) as usize
}

/// Users, vocabulary and a held-out evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedCorpus {
    pub vocab: Vocabulary,
    pub users: Vec<UserData>,
    pub dev: Vec<Vec<u32>>,
}

impl FederatedCorpus {
    /// Tokenise raw users into a corpus with one client per user. The
    /// vocabulary is built from the training users only.
    pub fn from_raw(train: &[RawUser], dev: &[RawUser], vocab_size: usize, lowercase: bool) -> Result<Self> {
        let tokenized: Vec<Vec<Vec<String>>> = train
            .iter()
            .map(|u| u.sentences.iter().map(|s| tokenize(s, lowercase)).collect())
            .collect();
        let vocab = Vocabulary::build(
            tokenized.iter().flatten().flatten().map(String::as_str),
            vocab_size,
        )?;
        let users = train
            .iter()
            .zip(&tokenized)
            .map(|(u, sents)| {
                let sentences: Vec<Vec<u32>> = sents
                    .iter()
                    .filter(|s| !s.is_empty())
                    .map(|s| vocab.encode(s.iter().map(String::as_str)))
                    .collect();
                let labels = sentences.iter().map(|s| hash_label(s)).collect();
                UserData {
                    user_id: u.user_id.clone(),
                    sentences,
                    labels,
                }
            })
            .filter(|u| !u.sentences.is_empty())
            .collect();
        let dev = dev
            .iter()
            .flat_map(|u| &u.sentences)
            .map(|s| tokenize(s, lowercase))
            .filter(|s| !s.is_empty())
            .map(|s| vocab.encode(s.iter().map(String::as_str)))
            .collect();
        let corpus = Self { vocab, users, dev };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn p_uni(&self) -> &[f64] {
        self.vocab.p_uni()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab.len();
        for u in &self.users {
            if u.sentences.is_empty() {
                return Err(Error::format("corpus", format!("user {} has no sentences", u.user_id)));
            }
            if u.labels.len() != u.sentences.len() {
                return Err(Error::format("corpus", format!("user {} has mismatched labels", u.user_id)));
            }
        }
        for &w in self
            .users
            .iter()
            .flat_map(|u| u.sentences.iter().flatten())
            .chain(self.dev.iter().flatten())
        {
            if w as usize >= v {
                return Err(Error::TokenOutOfRange { id: w, vocab: v });
            }
        }
        let total: f64 = self.p_uni().iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::format("corpus", format!("unigram sums to {total}")));
        }
        Ok(())
    }

    /// Every dev prediction.
    pub fn dev_examples(&self, k: usize) -> Vec<Example> {
        self.dev.iter().flat_map(|s| ngram_windows(s, k)).collect()
    }

    /// Decode back to text records.
    pub fn to_raw(&self) -> (Vec<RawUser>, Vec<RawUser>) {
        let text = |s: &Vec<u32>| {
            s.iter()
                .map(|&w| self.vocab.word(w).unwrap_or("<unk>"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let train = self
            .users
            .iter()
            .map(|u| RawUser {
                user_id: u.user_id.clone(),
                sentences: u.sentences.iter().map(text).collect(),
            })
            .collect();
        let dev = vec![RawUser {
            user_id: "dev".into(),
            sentences: self.dev.iter().map(text).collect(),
        }];
        (train, dev)
    }
}

/// One example per token; history is `k` BOS symbols followed by the prefix.
pub fn ngram_windows(sentence: &[u32], k: usize) -> Vec<Example> {
    let mut history = vec![BOS; k];
    let mut out = Vec::with_capacity(sentence.len());
    for &w in sentence {
        out.push(Example {
            history: history.clone(),
            target: w,
        });
        history.push(w);
    }
    out
}
