use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{combine_payloads, prepare_payload, ClientPayload};
use super::checkpoint::write_checkpoint;
use super::cohort::sample_cohort;
use super::local::{local_train, LocalSettings, NoiseSampler};
use super::server::{ema_update, server_step, ServerOptimizer, ServerState};
use crate::config::{ExperimentConfig, NoiseSetting, WordDistribution};
use crate::data::FederatedCorpus;
use crate::error::{Error, Result};
use crate::model::{softmax_eval, Example, ModelParams};
use crate::payload::{payload_size_bytes, SparsePayload, Weighting, WordSampler};
use crate::privacy::{calibrate_sigma, Calibration, PrivacyParams, RdpAccountant};
use crate::rng::{client_stream, purpose, stream};

pub const METRICS_VERSION: u32 = 1;

/// Per-round metrics, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub cohort_size: usize,
    /// Mean and max L2 norm of the wire payloads before clipping.
    pub mean_delta_norm: f64,
    pub max_delta_norm: f64,
    /// Dev perplexity of the server model and of its moving average, on evaluation rounds.
    pub ppl_theta: Option<f64>,
    pub ppl_phi: Option<f64>,
    /// Privacy spent so far; absent when noise is off.
    pub epsilon: Option<f64>,
    pub payload_bytes: u64,
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub theta: ModelParams,
    pub phi: ModelParams,
    pub noise_sigma: f64,
    pub calibration: Option<Calibration>,
    /// Dev perplexity of the add-one unigram from training counts.
    pub unigram_ppl: f64,
    pub metrics_path: Option<PathBuf>,
}

/// `exp` of the mean negative log unigram probability of the targets.
pub fn unigram_perplexity(p_uni: &[f64], examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut nll = 0.0;
    for ex in examples {
        let p = *p_uni.get(ex.target as usize).ok_or(Error::TokenOutOfRange {
            id: ex.target,
            vocab: p_uni.len(),
        })?;
        nll -= p.ln();
    }
    Ok((nll / examples.len() as f64).exp())
}

/// The noise multiplier a config asks for, calibrating when requested.
pub fn resolve_sigma(cfg: &ExperimentConfig) -> Result<(f64, Option<Calibration>)> {
    match cfg.noise {
        NoiseSetting::Fixed(s) => Ok((s, None)),
        NoiseSetting::Calibrate => {
            let rounds = cfg
                .rounds
                .ok_or_else(|| Error::config("rounds", "needed to calibrate the noise"))?;
            let c = calibrate_sigma(cfg.epsilon, cfg.delta, cfg.sampling_rate, rounds, &cfg.rdp_orders)?;
            Ok((c.sigma, Some(c)))
        }
    }
}

struct MetricsSink {
    jsonl: std::io::BufWriter<std::fs::File>,
    csv: Option<std::io::BufWriter<std::fs::File>>,
}

impl MetricsSink {
    fn create(dir: &Path, cfg: &ExperimentConfig, sigma: f64, unigram_ppl: f64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), cfg.to_text())?;
        let mut jsonl = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
        let config: serde_json::Map<String, serde_json::Value> = cfg
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
            .collect();
        let header = serde_json::json!({
            "artifact": "pflm-metrics",
            "version": METRICS_VERSION,
            "config": config,
            "noise_sigma": sigma,
            "unigram_ppl": unigram_ppl,
        });
        serde_json::to_writer(&mut jsonl, &header)?;
        jsonl.write_all(b"\n")?;
        jsonl.flush()?;
        let csv = if cfg.write_csv {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
            writeln!(f, "# pflm-metrics {METRICS_VERSION}")?;
            for line in cfg.to_text().lines() {
                writeln!(f, "# {line}")?;
            }
            writeln!(f, "round,ppl_theta,ppl_phi,epsilon")?;
            Some(f)
        } else {
            None
        };
        Ok(Self { jsonl, csv })
    }

    fn push(&mut self, r: &RoundReport) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, r)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        if let Some(f) = &mut self.csv {
            let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
            writeln!(f, "{},{},{},{}", r.round, opt(r.ppl_theta), opt(r.ppl_phi), opt(r.epsilon))?;
            f.flush()?;
        }
        Ok(())
    }
}

fn build_sampler(cfg: &ExperimentConfig, p_uni: &[f64], m: usize) -> Result<WordSampler> {
    let weights = match cfg.peu_distribution {
        WordDistribution::Unigram => p_uni.to_vec(),
        WordDistribution::Uniform => vec![1.0; p_uni.len()],
    };
    let mut sampler = WordSampler::new(&weights, cfg.peu_temperature, m, cfg.peu_weighting)?;
    if cfg.peu_weighting == Weighting::InclusionProb && sampler.inclusion().is_none() {
        sampler.estimate_inclusion(cfg.inclusion_trials, &mut stream(cfg.seed, &[purpose::INCLUSION]))?;
    }
    Ok(sampler)
}

/// Run every round of a private federated experiment on `corpus`.
///
/// When `out_dir` is given the config echo, a metrics stream (and optional
/// CSV), the vocabulary and final checkpoints of the model and its moving
/// average are written there.
pub fn run_experiment(cfg: &ExperimentConfig, corpus: &FederatedCorpus, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate_for_run()?;
    corpus.validate()?;
    let rounds = cfg.rounds.expect("validated");
    let eval_every = cfg.eval_every.expect("validated");
    let local = LocalSettings {
        epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.local_lr.expect("validated"),
    };
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = corpus.vocab.len();
    model_cfg.validate()?;
    let vocab = model_cfg.vocab_size;
    if let Some(m) = cfg.peu_m {
        if m > vocab {
            return Err(Error::config("peu_m", format!("{m} exceeds the vocabulary size {vocab}")));
        }
    }
    let population = corpus.users.len();
    if population == 0 {
        return Err(Error::InvalidArgument("corpus has no users".into()));
    }

    let (sigma, calibration) = resolve_sigma(cfg)?;
    let privacy: PrivacyParams = cfg.privacy_params(sigma);
    privacy.validate()?;
    let accountant = if sigma > 0.0 {
        Some(RdpAccountant::new(cfg.sampling_rate, sigma, cfg.delta, cfg.rdp_orders.clone())?)
    } else {
        None
    };

    let p_uni = corpus.p_uni();
    let noise = NoiseSampler::new(p_uni)?;
    let sampler = cfg.peu_m.map(|m| build_sampler(cfg, p_uni, m)).transpose()?;
    let payload_bytes = payload_size_bytes(&model_cfg, cfg.peu_m, model_cfg.lora_rank)?.total();

    let mut dev: Vec<&Vec<u32>> = corpus.dev.iter().collect();
    if cfg.eval_max_sentences > 0 {
        dev.truncate(cfg.eval_max_sentences);
    }
    let dev_examples: Vec<Example> = dev
        .iter()
        .flat_map(|s| crate::data::ngram_windows(s, model_cfg.fofe_order))
        .collect();
    let unigram_ppl = unigram_perplexity(p_uni, &dev_examples)?;

    let theta0 = ModelParams::init(&model_cfg, &mut stream(cfg.seed, &[purpose::INIT]))?;
    let mut state = ServerState::new(
        theta0,
        cfg.ema_gamma,
        ServerOptimizer {
            lr: cfg.server_lr,
            momentum: cfg.server_momentum,
        },
        accountant,
    )?;
    let (width, dense_len) = (state.theta.row_width(), state.theta.dense_len());

    let mut sink = out_dir
        .map(|d| MetricsSink::create(d, cfg, sigma, unigram_ppl))
        .transpose()?;
    let mut reports = Vec::with_capacity(rounds);

    for t in 1..=rounds {
        let round = |e: Error| Error::Round {
            round: t,
            source: Box::new(e),
        };
        let cohort = sample_cohort(population, cfg.sampling_rate, &mut stream(cfg.seed, &[purpose::COHORT, t as u64]))
            .map_err(round)?;
        let words: Vec<u32> = match &sampler {
            Some(s) => s
                .sample(&mut stream(cfg.seed, &[purpose::WORDS, t as u64]))
                .map_err(round)?,
            None => (0..vocab as u32).collect(),
        };
        let theta = &state.theta;
        let payloads: Vec<ClientPayload> = cohort
            .par_iter()
            .map(|&c| {
                let mut rng = client_stream(cfg.seed, t, c);
                let delta = local_train(&corpus.users[c].sentences, theta, &local, p_uni, &noise, &mut rng, c)?;
                prepare_payload(&delta, &words, sampler.as_ref(), cfg.clip_radius)
            })
            .collect::<Result<_>>()
            .map_err(round)?;

        if !payloads.is_empty() {
            let template = SparsePayload::zeros(words.clone(), width, dense_len);
            let pseudo = combine_payloads(
                &payloads,
                template,
                &privacy,
                population,
                cfg.normalization,
                vocab,
                &mut stream(cfg.seed, &[purpose::NOISE, t as u64]),
            )
            .map_err(round)?;
            server_step(&mut state, &pseudo).map_err(round)?;
            ema_update(&mut state);
        } else {
            state.round += 1;
        }
        if let Some(a) = &mut state.accountant {
            a.step();
        }

        let evaluate = t % eval_every == 0 || t == rounds;
        let (ppl_theta, ppl_phi) = if evaluate {
            (
                Some(softmax_eval(&state.theta, &dev_examples).map_err(round)?),
                Some(softmax_eval(&state.ema_params(), &dev_examples).map_err(round)?),
            )
        } else {
            (None, None)
        };
        let norms: Vec<f64> = payloads.iter().map(|p| p.norm).collect();
        let report = RoundReport {
            round: t,
            cohort_size: cohort.len(),
            mean_delta_norm: if norms.is_empty() { 0.0 } else { norms.iter().sum::<f64>() / norms.len() as f64 },
            max_delta_norm: norms.iter().cloned().fold(0.0, f64::max),
            ppl_theta,
            ppl_phi,
            epsilon: state.accountant.as_ref().map(RdpAccountant::epsilon),
            payload_bytes,
        };
        if let Some(s) = &mut sink {
            s.push(&report).map_err(round)?;
        }
        reports.push(report);
    }

    let phi = state.ema_params();
    let metrics_path = match out_dir {
        Some(dir) => {
            if cfg.write_checkpoints {
                let ck = dir.join("checkpoints");
                std::fs::create_dir_all(&ck)?;
                let echo = cfg.to_text();
                write_checkpoint(&ck.join("theta"), &state.theta, rounds, &echo)?;
                write_checkpoint(&ck.join("phi"), &phi, rounds, &echo)?;
                corpus.vocab.save(&ck.join("vocab.tsv"))?;
            }
            Some(dir.join("metrics.jsonl"))
        }
        None => None,
    };
    Ok(ExperimentOutcome {
        reports,
        theta: state.theta,
        phi,
        noise_sigma: sigma,
        calibration,
        unigram_ppl,
        metrics_path,
    })
}
