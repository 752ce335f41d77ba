//! Subcommand implementations behind the `pflm` binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use pflm_core::config::ExperimentConfig;
use pflm_core::data::{ngram_windows, read_jsonl, write_jsonl, FederatedCorpus, Vocabulary};
use pflm_core::federation::{read_checkpoint, run_experiment, ExperimentOutcome};
use pflm_core::model::{softmax_eval, Example, ModelConfig};
use pflm_core::payload::{payload_size_bytes, PayloadSize};
use pflm_core::privacy::{calibrate_sigma, epsilon_for};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "PFLM_OUTPUT_DIR";

/// Config file plus `key=value` overrides; an explicit output directory wins over both.
pub fn load_config(path: Option<&Path>, overrides: &[String], output_dir: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path, overrides)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

/// Build the corpus and run every round, writing artifacts to the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let corpus = cfg.build_corpus().context("building corpus")?;
    if corpus.dev.is_empty() {
        bail!("no dev sentences: set dev_path or synth_dev_sentences_per_user");
    }
    Ok(run_experiment(cfg, &corpus, Some(&cfg.output_dir))?)
}

/// One-line JSON summary of a finished run.
pub fn run_summary(cfg: &ExperimentConfig, out: &ExperimentOutcome) -> serde_json::Value {
    let last = out.reports.last();
    json!({
        "output_dir": cfg.output_dir.display().to_string(),
        "rounds": out.reports.len(),
        "noise_sigma": out.noise_sigma,
        "epsilon": last.and_then(|r| r.epsilon),
        "unigram_ppl": out.unigram_ppl,
        "final_ppl_theta": last.and_then(|r| r.ppl_theta),
        "final_ppl_phi": last.and_then(|r| r.ppl_phi),
    })
}

/// Either ε from σ or σ from ε, as one JSON object.
pub fn calibrate(
    epsilon: Option<f64>,
    sigma: Option<f64>,
    delta: f64,
    q: f64,
    rounds: usize,
    orders: &[f64],
) -> Result<serde_json::Value> {
    match (epsilon, sigma) {
        (Some(e), None) => {
            let c = calibrate_sigma(e, delta, q, rounds, orders)?;
            Ok(json!({
                "sigma": c.sigma, "epsilon": c.epsilon, "order": c.order,
                "delta": delta, "sampling_rate": q, "rounds": rounds,
            }))
        }
        (None, Some(s)) => {
            let (e, order) = epsilon_for(q, s, rounds, delta, orders)?;
            Ok(json!({
                "sigma": s, "epsilon": e, "order": order,
                "delta": delta, "sampling_rate": q, "rounds": rounds,
            }))
        }
        _ => bail!("give exactly one of --epsilon or --sigma"),
    }
}

/// One row of the payload table.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PayloadRow {
    pub setup: String,
    pub peu_m: Option<usize>,
    pub lora_rank: Option<usize>,
    #[serde(flatten)]
    pub size: PayloadSize,
    pub total_bytes: u64,
}

/// The full model, three partial-update sizes, two adapter ranks and two combinations.
pub fn default_payload_grid() -> Vec<(Option<usize>, Option<usize>)> {
    vec![
        (None, None),
        (Some(5000), None),
        (Some(10_000), None),
        (Some(20_000), None),
        (None, Some(48)),
        (None, Some(64)),
        (Some(5000), Some(64)),
        (Some(10_000), Some(64)),
    ]
}

fn setup_name(peu: Option<usize>, lora: Option<usize>) -> String {
    let k = |m: usize| if m % 1000 == 0 { format!("{}k", m / 1000) } else { m.to_string() };
    match (peu, lora) {
        (None, None) => "full model".into(),
        (Some(m), None) => format!("PEU({})", k(m)),
        (None, Some(r)) => format!("LoRA({r})"),
        (Some(m), Some(r)) => format!("PEU({})+LoRA({r})", k(m)),
    }
}

pub fn payload_rows(model: &ModelConfig, grid: &[(Option<usize>, Option<usize>)]) -> Result<Vec<PayloadRow>> {
    grid.iter()
        .map(|&(peu, lora)| {
            let size = payload_size_bytes(model, peu, lora)?;
            Ok(PayloadRow {
                setup: setup_name(peu, lora),
                peu_m: peu,
                lora_rank: lora,
                total_bytes: size.total(),
                size,
            })
        })
        .collect()
}

/// Fixed-width text table with decimal megabytes.
pub fn render_payload_table(rows: &[PayloadRow]) -> String {
    let mut out = format!(
        "{:<20} {:>12} {:>14} {:>12} {:>10}\n",
        "setup", "scalars", "scalar bytes", "index bytes", "total MB"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<20} {:>12} {:>14} {:>12} {:>10.2}\n",
            r.setup,
            r.size.scalar_count,
            r.size.scalars,
            r.size.indices,
            r.total_bytes as f64 / 1e6
        ));
    }
    out
}

/// Write the configured corpus as JSON lines; dev sentences go to `dev_out` if given.
pub fn synth_data(cfg: &ExperimentConfig, train_out: &Path, dev_out: Option<&Path>) -> Result<(usize, usize)> {
    let corpus = cfg.build_corpus()?;
    let (train, dev) = corpus.to_raw();
    write_jsonl(train_out, &train)?;
    if let Some(p) = dev_out {
        write_jsonl(p, &dev)?;
    }
    Ok((corpus.users.len(), corpus.dev.len()))
}

/// Softmax perplexity of a checkpoint on a JSON-lines dataset.
pub fn eval(manifest: &Path, data: &Path, vocab_path: Option<&Path>, lowercase: bool) -> Result<f64> {
    let (params, _) = read_checkpoint(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let vocab_path = match vocab_path {
        Some(p) => p.to_path_buf(),
        None => manifest.with_file_name("vocab.tsv"),
    };
    let vocab = Vocabulary::load(&vocab_path).with_context(|| format!("reading {}", vocab_path.display()))?;
    if vocab.len() != params.vocab_size() {
        bail!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            params.vocab_size()
        );
    }
    let users = read_jsonl(data)?;
    let examples: Vec<Example> = users
        .iter()
        .flat_map(|u| &u.sentences)
        .map(|s| pflm_core::data::tokenize(s, lowercase))
        .filter(|t| !t.is_empty())
        .flat_map(|t| ngram_windows(&vocab.encode(t.iter().map(String::as_str)), params.config.fofe_order))
        .collect();
    Ok(softmax_eval(&params, &examples)?)
}

/// Convenience used by tests: the corpus a config describes.
pub fn corpus_for(cfg: &ExperimentConfig) -> Result<FederatedCorpus> {
    Ok(cfg.build_corpus()?)
}
