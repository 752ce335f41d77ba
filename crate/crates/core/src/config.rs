//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Later assignments win, so
//! command-line overrides are applied by feeding them after the file.
//! Unknown keys and malformed values are errors that name the key.

use std::path::{Path, PathBuf};

use crate::data::{read_jsonl, synth_corpus, FederatedCorpus, SynthConfig};
use crate::error::{Error, Result};
use crate::federation::Normalization;
use crate::model::ModelConfig;
use crate::payload::Weighting;
use crate::privacy::{default_orders, PrivacyParams};
use crate::rng::{purpose, stream};

/// Distribution the server samples partial-update words from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordDistribution {
    Unigram,
    Uniform,
}

/// How the noise multiplier is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSetting {
    /// Calibrate from `(epsilon, delta, sampling_rate, rounds)`.
    Calibrate,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,

    pub corpus_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub lowercase: bool,
    pub synth: SynthConfig,
    /// Re-partition with a Dirichlet split into this many clients; 0 keeps users.
    pub dirichlet_clients: usize,
    pub dirichlet_concentration: f64,
    /// Cap on dev sentences used for perplexity; 0 means all.
    pub eval_max_sentences: usize,

    pub model: ModelConfig,

    pub epsilon: f64,
    pub delta: f64,
    pub sampling_rate: f64,
    pub rounds: Option<usize>,
    pub clip_radius: f64,
    pub noise: NoiseSetting,
    pub rdp_orders: Vec<f64>,
    pub normalization: Normalization,

    pub peu_m: Option<usize>,
    pub peu_weighting: Weighting,
    pub peu_distribution: WordDistribution,
    pub peu_temperature: f64,
    pub inclusion_trials: usize,

    pub ema_gamma: f64,
    pub server_lr: f64,
    pub server_momentum: f64,
    pub local_lr: Option<f64>,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eval_every: Option<usize>,
    pub write_csv: bool,
    pub write_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            corpus_path: None,
            dev_path: None,
            lowercase: true,
            synth: SynthConfig::default(),
            dirichlet_clients: 0,
            dirichlet_concentration: 1.0,
            eval_max_sentences: 0,
            model: ModelConfig::large_vocab(),
            epsilon: 2.0,
            delta: 1e-6,
            sampling_rate: 2e-3,
            rounds: None,
            clip_radius: 0.3,
            noise: NoiseSetting::Calibrate,
            rdp_orders: default_orders(),
            normalization: Normalization::ExpectedCohort,
            peu_m: None,
            peu_weighting: Weighting::ApproxQ,
            peu_distribution: WordDistribution::Unigram,
            peu_temperature: 1.0,
            inclusion_trials: 10_000,
            ema_gamma: 0.999,
            server_lr: 1.0,
            server_momentum: 0.0,
            local_lr: None,
            local_epochs: 1,
            batch_size: 16,
            eval_every: None,
            write_csv: false,
            write_checkpoints: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got {value:?}"))),
    }
}

/// `none` (or `0`) disables an optional count.
fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "none" | "off" | "0" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

/// `none` leaves a mandatory run setting unset.
fn parse_required<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn optional_text(v: Option<usize>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

fn list_text<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Apply one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |e: Error| match e {
            Error::InvalidArgument(m) => Error::config(key, m),
            other => other,
        };
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "corpus_path" => self.corpus_path = (v != "none").then(|| PathBuf::from(v)),
            "dev_path" => self.dev_path = (v != "none").then(|| PathBuf::from(v)),
            "lowercase" => self.lowercase = parse_bool(key, v)?,
            "synth_users" => self.synth.num_users = parse(key, v)?,
            "synth_sentences_per_user" => self.synth.sentences_per_user = parse(key, v)?,
            "synth_dev_sentences_per_user" => self.synth.dev_sentences_per_user = parse(key, v)?,
            "synth_topics" => self.synth.topics = parse(key, v)?,
            "synth_zipf_exponent" => self.synth.zipf_exponent = parse(key, v)?,
            "synth_min_len" => self.synth.min_len = parse(key, v)?,
            "synth_max_len" => self.synth.max_len = parse(key, v)?,
            "synth_coherence" => self.synth.coherence = parse(key, v)?,
            "synth_cluster_size" => self.synth.cluster_size = parse(key, v)?,
            "synth_rank_window" => self.synth.rank_window = parse(key, v)?,
            "dirichlet_clients" => self.dirichlet_clients = parse(key, v)?,
            "dirichlet_concentration" => self.dirichlet_concentration = parse(key, v)?,
            "eval_max_sentences" => self.eval_max_sentences = parse(key, v)?,
            "vocab_size" => self.model.vocab_size = parse(key, v)?,
            "embed_dim" => self.model.embed_dim = parse(key, v)?,
            "fofe_order" => self.model.fofe_order = parse(key, v)?,
            "fofe_alpha" => self.model.fofe_alpha = parse(key, v)?,
            "hidden_widths" => self.model.hidden_widths = parse_list(key, v)?,
            "lora_rank" => self.model.lora_rank = parse_optional(key, v)?,
            "nce_noise_k" => self.model.nce_noise_k = parse(key, v)?,
            "tie_embeddings" => self.model.tie_embeddings = parse_bool(key, v)?,
            "embed_init" => self.model.embed_init = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "sampling_rate" => self.sampling_rate = parse(key, v)?,
            "rounds" => self.rounds = parse_required(key, v)?,
            "clip_radius" => self.clip_radius = parse(key, v)?,
            "noise_sigma" => {
                self.noise = match v {
                    "auto" => NoiseSetting::Calibrate,
                    x => NoiseSetting::Fixed(parse(key, x)?),
                }
            }
            "rdp_orders" => {
                self.rdp_orders = match v {
                    "default" => default_orders(),
                    x => parse_list(key, x)?,
                }
            }
            "normalization" => self.normalization = v.parse().map_err(bad)?,
            "peu_m" => self.peu_m = parse_optional(key, v)?,
            "peu_weighting" => self.peu_weighting = v.parse().map_err(bad)?,
            "peu_distribution" => {
                self.peu_distribution = match v {
                    "unigram" => WordDistribution::Unigram,
                    "uniform" => WordDistribution::Uniform,
                    _ => return Err(Error::config(key, "expected unigram or uniform")),
                }
            }
            "peu_temperature" => self.peu_temperature = parse(key, v)?,
            "inclusion_trials" => self.inclusion_trials = parse(key, v)?,
            "ema_gamma" => self.ema_gamma = parse(key, v)?,
            "server_lr" => self.server_lr = parse(key, v)?,
            "server_momentum" => self.server_momentum = parse(key, v)?,
            "local_lr" => self.local_lr = parse_required(key, v)?,
            "local_epochs" => self.local_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "eval_every" => self.eval_every = parse_required(key, v)?,
            "write_csv" => self.write_csv = parse_bool(key, v)?,
            "write_checkpoints" => self.write_checkpoints = parse_bool(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Apply every assignment in `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format("config", format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then `overrides` of the form `key=value`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            cfg.apply_text(&std::fs::read_to_string(p)?)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::format("override", format!("expected key=value, got {o:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key and its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".into(), |x| x.display().to_string());
        let m = &self.model;
        let s = &self.synth;
        vec![
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("corpus_path", path(&self.corpus_path)),
            ("dev_path", path(&self.dev_path)),
            ("lowercase", self.lowercase.to_string()),
            ("synth_users", s.num_users.to_string()),
            ("synth_sentences_per_user", s.sentences_per_user.to_string()),
            ("synth_dev_sentences_per_user", s.dev_sentences_per_user.to_string()),
            ("synth_topics", s.topics.to_string()),
            ("synth_zipf_exponent", s.zipf_exponent.to_string()),
            ("synth_min_len", s.min_len.to_string()),
            ("synth_max_len", s.max_len.to_string()),
            ("synth_coherence", s.coherence.to_string()),
            ("synth_cluster_size", s.cluster_size.to_string()),
            ("synth_rank_window", s.rank_window.to_string()),
            ("dirichlet_clients", self.dirichlet_clients.to_string()),
            ("dirichlet_concentration", self.dirichlet_concentration.to_string()),
            ("eval_max_sentences", self.eval_max_sentences.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("fofe_order", m.fofe_order.to_string()),
            ("fofe_alpha", m.fofe_alpha.to_string()),
            ("hidden_widths", list_text(&m.hidden_widths)),
            ("lora_rank", optional_text(m.lora_rank)),
            ("nce_noise_k", m.nce_noise_k.to_string()),
            ("tie_embeddings", m.tie_embeddings.to_string()),
            ("embed_init", m.embed_init.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("delta", self.delta.to_string()),
            ("sampling_rate", self.sampling_rate.to_string()),
            ("rounds", optional_text(self.rounds)),
            ("clip_radius", self.clip_radius.to_string()),
            (
                "noise_sigma",
                match self.noise {
                    NoiseSetting::Calibrate => "auto".into(),
                    NoiseSetting::Fixed(x) => x.to_string(),
                },
            ),
            ("rdp_orders", list_text(&self.rdp_orders)),
            (
                "normalization",
                match self.normalization {
                    Normalization::ExpectedCohort => "expected-cohort".into(),
                    Normalization::ActualCohort => "actual-cohort".into(),
                },
            ),
            ("peu_m", optional_text(self.peu_m)),
            (
                "peu_weighting",
                match self.peu_weighting {
                    Weighting::ApproxQ => "approx-q".into(),
                    Weighting::InclusionProb => "inclusion-prob".into(),
                },
            ),
            (
                "peu_distribution",
                match self.peu_distribution {
                    WordDistribution::Unigram => "unigram".into(),
                    WordDistribution::Uniform => "uniform".into(),
                },
            ),
            ("peu_temperature", self.peu_temperature.to_string()),
            ("inclusion_trials", self.inclusion_trials.to_string()),
            ("ema_gamma", self.ema_gamma.to_string()),
            ("server_lr", self.server_lr.to_string()),
            ("server_momentum", self.server_momentum.to_string()),
            ("local_lr", self.local_lr.map_or_else(|| "none".into(), |x| x.to_string())),
            ("local_epochs", self.local_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_every", optional_text(self.eval_every)),
            ("write_csv", self.write_csv.to_string()),
            ("write_checkpoints", self.write_checkpoints.to_string()),
        ]
    }

    /// Canonical text form; parsing it back yields the same config.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Internal consistency checks that do not depend on the corpus.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(m) = self.peu_m {
            if m > self.model.vocab_size {
                return Err(Error::config(
                    "peu_m",
                    format!("{m} exceeds the vocabulary size {}", self.model.vocab_size),
                ));
            }
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::config("sampling_rate", "must lie in (0, 1]"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        if !(self.clip_radius > 0.0) {
            return Err(Error::config("clip_radius", "must be positive"));
        }
        if let NoiseSetting::Fixed(s) = self.noise {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config("noise_sigma", "must be auto or a finite non-negative number"));
            }
        }
        if self.rdp_orders.is_empty() || self.rdp_orders.iter().any(|&a| !(a > 1.0)) {
            return Err(Error::config("rdp_orders", "orders must all exceed 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_gamma) {
            return Err(Error::config("ema_gamma", "must lie in [0, 1]"));
        }
        if !(self.server_lr >= 0.0 && self.server_lr.is_finite()) {
            return Err(Error::config("server_lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.server_momentum) {
            return Err(Error::config("server_momentum", "must lie in [0, 1)"));
        }
        if let Some(lr) = self.local_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("local_lr", "must be positive"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.peu_temperature > 0.0) {
            return Err(Error::config("peu_temperature", "must be positive"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("eval_every", "must be positive"));
        }
        if self.rounds == Some(0) {
            return Err(Error::config("rounds", "must be positive"));
        }
        if !(self.dirichlet_concentration > 0.0) {
            return Err(Error::config("dirichlet_concentration", "must be positive"));
        }
        Ok(())
    }

    /// Checks that only a training run needs: the mandatory keys.
    pub fn validate_for_run(&self) -> Result<()> {
        self.validate()?;
        for (key, missing) in [
            ("local_lr", self.local_lr.is_none()),
            ("rounds", self.rounds.is_none()),
            ("eval_every", self.eval_every.is_none()),
        ] {
            if missing {
                return Err(Error::config(key, "must be set for a training run"));
            }
        }
        Ok(())
    }

    /// Synthetic-corpus settings with the shared seed and vocabulary size.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            vocab_size: self.model.vocab_size,
            ..self.synth.clone()
        }
    }

    /// Load the corpus file (or generate the synthetic corpus) and apply the
    /// optional Dirichlet re-partition.
    pub fn build_corpus(&self) -> Result<FederatedCorpus> {
        let corpus = match &self.corpus_path {
            Some(path) => {
                let train = read_jsonl(path)?;
                let dev = match &self.dev_path {
                    Some(d) => read_jsonl(d)?,
                    None => Vec::new(),
                };
                FederatedCorpus::from_raw(&train, &dev, self.model.vocab_size, self.lowercase)?
            }
            None => synth_corpus(&self.synth_config())?,
        };
        if self.dirichlet_clients > 0 {
            corpus.repartition(
                self.dirichlet_clients,
                self.dirichlet_concentration,
                &mut stream(self.seed, &[purpose::DATA, 1]),
            )
        } else {
            Ok(corpus)
        }
    }

    /// Privacy parameters with the noise multiplier still unresolved when
    /// calibration is requested (it is filled in by the experiment).
    pub fn privacy_params(&self, noise_sigma: f64) -> PrivacyParams {
        PrivacyParams {
            epsilon: self.epsilon,
            delta: self.delta,
            sampling_rate: self.sampling_rate,
            rounds: self.rounds.unwrap_or(0),
            clip_radius: self.clip_radius,
            noise_sigma,
            rdp_orders: self.rdp_orders.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("peu_m = 5000 # sampled rows\nlora_rank=64\nlocal_lr = 0.5\n").unwrap();
        let mut back = ExperimentConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.peu_m, Some(5000));
    }

    #[test]
    fn errors_name_the_key() {
        let mut cfg = ExperimentConfig::default();
        let e = cfg.set("peu_size", "3").unwrap_err().to_string();
        assert!(e.contains("peu_size") && e.contains("unknown"), "{e}");
        let e = cfg.set("batch_size", "many").unwrap_err().to_string();
        assert!(e.contains("batch_size"), "{e}");
        let e = cfg.set("peu_weighting", "whatever").unwrap_err().to_string();
        assert!(e.contains("peu_weighting"), "{e}");
        let e = ExperimentConfig::load(None, &["peu_m=200000".into()]).unwrap_err().to_string();
        assert!(e.contains("peu_m"), "{e}");
        let e = ExperimentConfig::default().validate_for_run().unwrap_err().to_string();
        assert!(e.contains("local_lr"), "{e}");
    }

    #[test]
    fn overrides_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.conf");
        std::fs::write(&path, "peu_m = 10000\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&path), &["peu_m=5000".into()]).unwrap();
        assert_eq!(cfg.peu_m, Some(5000));
    }
}
