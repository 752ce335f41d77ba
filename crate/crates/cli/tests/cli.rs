//! The `pflm` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use pflm_core::data::{RawUser, Vocabulary};
use pflm_core::federation::write_checkpoint;
use pflm_core::model::{ModelConfig, ModelParams};

fn pflm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pflm"))
        .args(args)
        .env_remove("PFLM_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "stderr: {}", stderr(o));
    serde_json::from_str(stdout(o).trim()).unwrap()
}

#[test]
fn calibrate_both_directions() {
    let o = pflm(&["calibrate", "--epsilon", "2", "--delta", "1e-6", "-q", "0.002", "-t", "2000"]);
    let v = json(&o);
    let sigma = v["sigma"].as_f64().unwrap();
    assert!((sigma - 0.8618).abs() < 0.005, "{sigma}");
    let eps = v["epsilon"].as_f64().unwrap();
    assert!(eps <= 2.0 && eps >= 1.998);

    let back = json(&pflm(&[
        "calibrate", "--sigma", &sigma.to_string(), "--delta", "1e-6", "-q", "0.002", "-t", "2000",
    ]));
    assert!((back["epsilon"].as_f64().unwrap() - eps).abs() < 1e-9);
    assert!(back["order"].as_f64().unwrap() > 1.0);
}

#[test]
fn usage_errors_exit_nonzero_on_stderr_only() {
    for args in [
        vec!["calibrate", "--delta", "1e-6", "-q", "0.1", "-t", "10"],
        vec!["calibrate", "--epsilon", "1", "--sigma", "1", "--delta", "1e-6", "-q", "0.1", "-t", "10"],
        vec!["run"],
        vec!["eval", "--checkpoint", "missing.manifest"],
        vec!["frobnicate"],
    ] {
        let o = pflm(&args);
        assert!(!o.status.success(), "{args:?}");
        assert!(o.stdout.is_empty(), "{args:?}: {}", stdout(&o));
        assert!(!o.stderr.is_empty(), "{args:?}");
    }
}

#[test]
fn config_errors_name_the_key() {
    let o = pflm(&["show-config", "-s", "peu_m=200000"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("peu_m"), "{}", stderr(&o));
    let o = pflm(&["show-config", "-s", "peu_size=3"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("peu_size"));
    let o = pflm(&["show-config", "-s", "clip_radius=wide"]);
    assert!(stderr(&o).contains("clip_radius"));
}

#[test]
fn overrides_beat_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("a.conf");
    std::fs::write(&file, "peu_m = 10000\nbatch_size = 8\n").unwrap();
    let o = pflm(&["show-config", "-c", file.to_str().unwrap(), "-s", "peu_m=5000"]);
    let text = stdout(&o);
    assert!(text.contains("peu_m = 5000\n") && text.contains("batch_size = 8\n"), "{text}");
}

#[test]
fn default_file_matches_built_in_defaults() {
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.conf");
    let a = stdout(&pflm(&["show-config", "-c", file.to_str().unwrap()]));
    let b = stdout(&pflm(&["show-config"]));
    assert_eq!(a, b);
    for line in [
        "clip_radius = 0.3",
        "sampling_rate = 0.002",
        "delta = 0.000001",
        "epsilon = 2",
        "batch_size = 16",
        "local_epochs = 1",
        "nce_noise_k = 1024",
    ] {
        assert!(a.lines().any(|l| l == line), "{line}");
    }
}

#[test]
fn payload_table_and_json() {
    let o = pflm(&["payload-size"]);
    assert!(o.status.success());
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 9);
    assert!(table.contains("PEU(10k)+LoRA(64)"));
    let rows = json(&pflm(&["payload-size", "--json", "--peu", "5000"]));
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["scalars"].as_u64().unwrap(), 3_838_976 * 4);
}

#[test]
fn eval_of_a_flat_model_is_vocabulary_sized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        vocab_size: 1000,
        embed_dim: 8,
        hidden_widths: vec![8],
        nce_noise_k: 4,
        ..ModelConfig::large_vocab()
    };
    let params = ModelParams::zeros(&cfg).unwrap();
    let manifest = write_checkpoint(&dir.path().join("flat"), &params, 0, "seed = 0\n").unwrap();
    let mut words = vec!["<s>".to_string(), "<unk>".to_string()];
    words.extend((0..998).map(|i| format!("w{i}")));
    Vocabulary::from_counts(words, vec![1; 1000]).unwrap().save(&dir.path().join("vocab.tsv")).unwrap();
    let data = dir.path().join("dev.jsonl");
    let users = vec![RawUser {
        user_id: "u".into(),
        sentences: vec!["w1 w2 w3 w4".into(), "w500 w9 nonsense".into()],
    }];
    pflm_core::data::write_jsonl(&data, &users).unwrap();
    let v = json(&pflm(&[
        "eval", "--checkpoint", manifest.to_str().unwrap(), "--data", data.to_str().unwrap(),
    ]));
    let ppl = v["perplexity"].as_f64().unwrap();
    assert!((ppl - 1000.0).abs() <= 1.0, "{ppl}");
}

const TINY: &[&str] = &[
    "-s", "seed=3",
    "-s", "vocab_size=60",
    "-s", "embed_dim=4",
    "-s", "hidden_widths=8",
    "-s", "nce_noise_k=4",
    "-s", "synth_users=6",
    "-s", "synth_sentences_per_user=10",
    "-s", "synth_dev_sentences_per_user=2",
    "-s", "synth_topics=2",
    "-s", "rounds=4",
    "-s", "sampling_rate=0.5",
    "-s", "epsilon=8",
    "-s", "local_lr=0.05",
    "-s", "server_lr=0.05",
    "-s", "eval_every=2",
    "-s", "peu_m=20",
    "-s", "write_csv=true",
];

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["run", "-o", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let summary = json(&pflm(&args));
    assert_eq!(summary["rounds"], 4);
    let first = std::fs::read(out.join("metrics.jsonl")).unwrap();
    json(&pflm(&args));
    assert_eq!(first, std::fs::read(out.join("metrics.jsonl")).unwrap());

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "round,ppl_theta,ppl_phi,epsilon"));
    assert!(std::fs::read_to_string(out.join("config.txt")).unwrap().contains("peu_m = 20"));

    let manifest = out.join("checkpoints/phi.manifest");
    assert!(std::fs::read_to_string(&manifest).unwrap().contains("config peu_m = 20"));
    let dev = dir.path().join("dev.jsonl");
    let train = dir.path().join("train.jsonl");
    let mut synth = vec!["synth-data", "--out", train.to_str().unwrap(), "--dev-out", dev.to_str().unwrap()];
    synth.extend_from_slice(TINY);
    assert!(pflm(&synth).status.success());
    let v = json(&pflm(&["eval", "--checkpoint", manifest.to_str().unwrap(), "--data", dev.to_str().unwrap()]));
    let ppl = v["perplexity"].as_f64().unwrap();
    let last = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(last.lines().last().unwrap()).unwrap();
    assert!((ppl - last["ppl_phi"].as_f64().unwrap()).abs() < 1e-9 * ppl, "{ppl} vs {last}");
}

#[test]
fn output_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.conf");
    std::fs::write(&conf, format!("output_dir = {}\n", dir.path().join("from_file").display())).unwrap();
    let mut base = vec!["run", "-c", conf.to_str().unwrap()];
    base.extend_from_slice(TINY);
    base.extend_from_slice(&["-s", "write_checkpoints=false"]);

    assert!(pflm(&base).status.success());
    assert!(dir.path().join("from_file/metrics.jsonl").exists());

    let env_dir = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_pflm")).args(&base).env("PFLM_OUTPUT_DIR", &env_dir).output().unwrap();
    assert!(o.status.success());
    assert!(env_dir.join("metrics.jsonl").exists());

    let flag_dir = dir.path().join("from_flag");
    let mut with_flag = base.clone();
    with_flag.extend_from_slice(&["-o", flag_dir.to_str().unwrap()]);
    let o = Command::new(env!("CARGO_BIN_EXE_pflm")).args(&with_flag).env("PFLM_OUTPUT_DIR", &env_dir).output().unwrap();
    assert!(o.status.success());
    assert!(flag_dir.join("metrics.jsonl").exists());
}

#[test]
fn corpus_files_round_trip_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.jsonl");
    let dev = dir.path().join("dev.jsonl");
    // Enough text that every word occurs, so the rebuilt vocabulary is the same table.
    let dense = ["-s", "synth_sentences_per_user=60"];
    let mut synth = vec!["synth-data", "--out", train.to_str().unwrap(), "--dev-out", dev.to_str().unwrap()];
    synth.extend_from_slice(TINY);
    synth.extend_from_slice(&dense);
    assert!(pflm(&synth).status.success());

    let out_a = dir.path().join("a");
    let mut from_synth = vec!["run", "-o", out_a.to_str().unwrap()];
    from_synth.extend_from_slice(TINY);
    from_synth.extend_from_slice(&dense);
    let a = json(&pflm(&from_synth));

    let out_b = dir.path().join("b");
    let corpus = format!("corpus_path={}", train.display());
    let dev_path = format!("dev_path={}", dev.display());
    let mut from_files = vec!["run", "-o", out_b.to_str().unwrap()];
    from_files.extend_from_slice(TINY);
    from_files.extend_from_slice(&dense);
    from_files.extend_from_slice(&["-s", &corpus, "-s", &dev_path]);
    let b = json(&pflm(&from_files));
    assert_eq!(a["final_ppl_theta"], b["final_ppl_theta"]);
    assert_eq!(a["unigram_ppl"], b["unigram_ppl"]);
}
