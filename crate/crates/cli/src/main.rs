use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use pflm_cli::{
    calibrate, default_payload_grid, eval, load_config, payload_rows, render_payload_table, run, run_summary,
    synth_data, OUTPUT_DIR_ENV,
};
use pflm_core::privacy::default_orders;

#[derive(Parser)]
#[command(name = "pflm", version, about = "Private federated training of large-vocabulary language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key; may be repeated. Applied after the file.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with private federated rounds and write metrics and checkpoints.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; beats the config file.
        #[arg(short, long, env = OUTPUT_DIR_ENV)]
        output_dir: Option<PathBuf>,
    },
    /// Noise multiplier for a privacy target, or the privacy of a noise multiplier.
    Calibrate {
        #[arg(long, conflicts_with = "sigma", required_unless_present = "sigma")]
        epsilon: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        delta: f64,
        /// Poisson sampling rate.
        #[arg(short, long)]
        q: f64,
        #[arg(short = 't', long)]
        rounds: usize,
        /// Comma-separated RDP orders; defaults to 2..64, 128, 256.
        #[arg(long, value_delimiter = ',')]
        orders: Option<Vec<f64>>,
    },
    /// Bytes uploaded per client for a grid of partial-update and adapter settings.
    PayloadSize {
        #[command(flatten)]
        config: ConfigArgs,
        /// Single row with this many sampled words instead of the default grid.
        #[arg(long)]
        peu: Option<usize>,
        /// Single row with this adapter rank instead of the default grid.
        #[arg(long)]
        lora: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Write the configured synthetic corpus as JSON lines.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dev_out: Option<PathBuf>,
    },
    /// Print the resolved configuration as a config file.
    ShowConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Softmax perplexity of a checkpoint on a JSON-lines dataset.
    Eval {
        /// Checkpoint manifest.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary file; defaults to vocab.tsv next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        lowercase: bool,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, output_dir } => {
            let cfg = load_config(config.config.as_deref(), &config.overrides, output_dir)?;
            let out = run(&cfg)?;
            println!("{}", run_summary(&cfg, &out));
        }
        Command::Calibrate {
            epsilon,
            sigma,
            delta,
            q,
            rounds,
            orders,
        } => {
            let orders = orders.unwrap_or_else(default_orders);
            println!("{}", calibrate(epsilon, sigma, delta, q, rounds, &orders)?);
        }
        Command::PayloadSize { config, peu, lora, json } => {
            let cfg = load_config(config.config.as_deref(), &config.overrides, None)?;
            let grid = if peu.is_some() || lora.is_some() {
                vec![(peu, lora)]
            } else {
                default_payload_grid()
            };
            let rows = payload_rows(&cfg.model, &grid)?;
            if json {
                println!("{}", serde_json::to_string(&rows)?);
            } else {
                print!("{}", render_payload_table(&rows));
            }
        }
        Command::SynthData { config, out, dev_out } => {
            let cfg = load_config(config.config.as_deref(), &config.overrides, None)?;
            let (users, dev) = synth_data(&cfg, &out, dev_out.as_deref())?;
            eprintln!("wrote {users} users and {dev} dev sentences");
        }
        Command::ShowConfig { config } => {
            let cfg = load_config(config.config.as_deref(), &config.overrides, None)?;
            print!("{}", cfg.to_text());
        }
        Command::Eval {
            checkpoint,
            data,
            vocab,
            lowercase,
        } => {
            let ppl = eval(&checkpoint, &data, vocab.as_deref(), lowercase)?;
            println!("{}", serde_json::json!({ "perplexity": ppl }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
