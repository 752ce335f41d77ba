use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS_TOKEN: &str = "<s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token table with training counts and the add-one smoothed unigram.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
    counts: Vec<u64>,
    p_uni: Vec<f64>,
}

impl Vocabulary {
    /// Keep the `size - 2` most frequent words (ties broken lexicographically)
    /// after BOS and UNK. Tokens outside the table count towards UNK.
    pub fn build<'a, I>(tokens: I, size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if size < 3 {
            return Err(Error::config("vocab_size", "must be at least 3"));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        let mut total = 0u64;
        for t in tokens {
            *freq.entry(t).or_default() += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::InvalidArgument("cannot build a vocabulary from an empty corpus".into()));
        }
        freq.remove(BOS_TOKEN);
        let unk_literal = freq.remove(UNK_TOKEN).unwrap_or(0);
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let kept = ranked.len().min(size - 2);
        let dropped: u64 = ranked[kept..].iter().map(|(_, c)| c).sum();
        let mut words = vec![BOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut counts = vec![0, unk_literal + dropped];
        for &(w, c) in &ranked[..kept] {
            words.push(w.to_string());
            counts.push(c);
        }
        Self::from_counts(words, counts)
    }

    /// Table from explicit words and counts; entries 0 and 1 must be BOS and UNK.
    pub fn from_counts(words: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if words.len() != counts.len() {
            return Err(Error::Shape(format!("{} words but {} counts", words.len(), counts.len())));
        }
        if words.len() < 3 || words[0] != BOS_TOKEN || words[1] != UNK_TOKEN {
            return Err(Error::format("vocabulary", "must start with <s> and <unk> and hold a real word"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate word {w:?}")));
            }
        }
        let denom = (counts.iter().sum::<u64>() + counts.len() as u64) as f64;
        let p_uni = counts.iter().map(|&c| (c + 1) as f64 / denom).collect();
        Ok(Self {
            words,
            index,
            counts,
            p_uni,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Add-one smoothed unigram over every entry, BOS and UNK included.
    pub fn p_uni(&self) -> &[f64] {
        &self.p_uni
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<u32> {
        tokens.into_iter().map(|t| self.id(t)).collect()
    }

    /// Tab-separated `word count` lines in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (w, c) in self.words.iter().zip(&self.counts) {
            writeln!(f, "{w}\t{c}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let (mut words, mut counts) = (Vec::new(), Vec::new());
        for (n, line) in f.lines().enumerate() {
            let line = line?;
            let (w, c) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::format("vocabulary", format!("line {} lacks a tab", n + 1)))?;
            let c = c
                .parse()
                .map_err(|_| Error::format("vocabulary", format!("line {}: bad count {c:?}", n + 1)))?;
            words.push(w.to_string());
            counts.push(c);
        }
        Self::from_counts(words, counts)
    }
}
