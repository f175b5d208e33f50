//! `textgan`: train, evaluate and sample text-GAN generators.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort, 1 other.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use textgan_core::checkpoint::Checkpoint;
use textgan_core::config::{RunConfig, Scale};
use textgan_core::data::{decode, oracle_generate, read_corpus, OracleSpec, SequenceBatch, Vocabulary};
use textgan_core::metrics::{evaluate, write_csv, BleuReference, EvalConfig};
use textgan_core::report::{emit_report, EMPTY_PLACEHOLDER};
use textgan_core::runner::{self, generator_from_checkpoint};
use textgan_core::{Error, SampleMode};

#[derive(Parser)]
#[command(name = "textgan", version, about = "Text-GAN laboratory: LSTM and Transformer generators under DPGAN-style training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// MLE pretraining from a TOML config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Adversarial training starting from (or resuming) a checkpoint.
    Adversarial {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
    },
    /// Canned experiment: Transformer variant plus LSTM baseline.
    Experiment {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        id: u8,
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Directory holding captions.txt and embeddings.txt.
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// Output root; defaults to runs/exp<id>-<scale>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metric record of a checkpoint against a one-sentence-per-line file.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decoded samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(short = 'n', default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take the most likely token instead of sampling.
        #[arg(long)]
        argmax: bool,
    },
    /// Writes an oracle corpus (tokens `w4`, `w5`, ...) one sentence per line.
    SynthData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        vocab: usize,
        #[arg(short = 'n')]
        count: usize,
        #[arg(short = 'o')]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        len: usize,
    },
    /// Regenerates plots and the sample table of a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Pretrain { config } => {
            let cfg = RunConfig::load(&config)?;
            let recs = runner::run_pretrain(&cfg)?;
            emit_report(&cfg.run.out_dir)?;
            print!("{}", write_csv(&recs));
        }
        Command::Adversarial { config, from } => {
            let cfg = RunConfig::load(&config)?;
            let ck = Checkpoint::load(&from)?;
            let recs = runner::run_adversarial(&cfg, &ck)?;
            emit_report(&cfg.run.out_dir)?;
            print!("{}", write_csv(&recs));
        }
        Command::Experiment {
            id,
            scale,
            seed,
            data_dir,
            out,
        } => {
            let scale: Scale = scale.parse()?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/exp{id}-{}", if scale == Scale::Desk { "desk" } else { "paper" })));
            runner::run_experiment(id, scale, &data_dir, &out, seed)?;
            print!("{}", fs::read_to_string(out.join("summary.txt"))?);
        }
        Command::Evaluate { ckpt, data, samples, seed } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (gen, vocab) = generator_from_checkpoint(&ck)?;
            let lines = read_corpus(&data).map_err(|e| Error::Config(format!("{}: {e}", data.display())))?;
            if lines.is_empty() {
                return Err(Error::Config(format!("{} holds no sentences", data.display())));
            }
            let held_out = SequenceBatch::encode_lines(&vocab, &lines, gen.max_len())?;
            let refs: Vec<Vec<usize>> = (0..held_out.len()).map(|i| held_out.content(i).to_vec()).collect();
            let refs = BleuReference::new(&refs, 5)?;
            let cfg = EvalConfig {
                n_samples: samples.max(2),
                batch_size: 128,
                seed,
            };
            let (rec, _) = evaluate(&gen, &held_out, &refs, &cfg, ck.manifest.phase, ck.manifest.iteration)?;
            print!("{}", write_csv(&[rec]));
        }
        Command::Sample { ckpt, count, seed, argmax } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (gen, vocab) = generator_from_checkpoint(&ck)?;
            let mode = if argmax { SampleMode::Argmax } else { SampleMode::Multinomial };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = gen.sample(count, &mut rng, mode)?;
            for i in 0..out.len() {
                let text = decode(&vocab, out.tokens.content(i));
                println!("{}", if text.is_empty() { EMPTY_PLACEHOLDER } else { &text });
            }
        }
        Command::SynthData {
            seed,
            vocab,
            count,
            out,
            len,
        } => {
            let spec = OracleSpec {
                seed,
                vocab_size: vocab,
                seq_len: len,
                ..OracleSpec::default()
            };
            let v = Vocabulary::synthetic(vocab).map_err(|e| Error::Config(e.to_string()))?;
            let batch = oracle_generate(&spec, count).map_err(|e| Error::Config(e.to_string()))?;
            let text: String = (0..batch.len()).map(|i| decode(&v, batch.content(i)) + "\n").collect();
            fs::write(&out, text)?;
        }
        Command::Report { dir } => {
            let files = emit_report(&dir)?;
            println!("{} plots, sample table {}", files.svgs.len(), files.table.display());
        }
    }
    Ok(())
}
