//! Training orchestration: data preparation, the MLE and adversarial loops,
//! metric logging and checkpointing.
//!
//! Every random draw comes from a ChaCha8 stream keyed by
//! (seed, purpose, phase, iteration), so a run resumed from a checkpoint
//! replays exactly the draws of an uninterrupted run.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{compute_rewards, policy_gradient_loss, train_discriminator_step, DiscriminatorLM, EmaBaseline};
use crate::checkpoint::{Checkpoint, Manifest};
use crate::config::{experiment_config, experiment_variant, DataSource, RunConfig, Scale};
use crate::data::{
    build_vocab, load_embeddings, oracle_generate, read_corpus, Embeddings, OracleSpec, SequenceBatch, Vocabulary,
};
use crate::error::{Error, Result};
use crate::generators::{Generator, SampleMode, SampleOutput, VariantTag};
use crate::metrics::{evaluate, parse_csv, BleuReference, EvalConfig, MetricsRecord, Phase, CSV_HEADER};
use crate::params::{Adam, Grads, Session};
use crate::report::{emit_comparison, emit_report};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SAMPLES_FILE: &str = "samples.tsv";
pub const COLLAPSE_FILE: &str = "collapse.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const DIAGNOSTIC_CKPT: &str = "diagnostic.ckpt";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const ADVERSARIAL_CKPT: &str = "adversarial.ckpt";

#[derive(Clone, Copy, Debug)]
#[repr(u64)]
enum Purpose {
    GenInit = 1,
    DiscInit,
    Split,
    Batches,
    Dropout,
    Policy,
    Disc,
    Eval,
    Embeddings,
}

fn stream(seed: u64, purpose: Purpose, phase: Phase, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(((phase as u64) << 32) | iteration as u64);
    rng
}

/// Training text, held-out text and BLEU references for one run.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: SequenceBatch,
    pub test: SequenceBatch,
    pub references: Vec<Vec<usize>>,
    pub embeddings: Option<Embeddings>,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Dataset> {
    let m = &cfg.model;
    let d = &cfg.data;
    let (vocab, train, test) = match d.source {
        DataSource::Oracle => {
            let spec = OracleSpec {
                seed: d.oracle_seed,
                vocab_size: m.vocab_size,
                seq_len: m.max_len,
                hidden: d.oracle_hidden,
            };
            let all = oracle_generate(&spec, d.n_train + d.n_test)?;
            (
                Vocabulary::synthetic(m.vocab_size)?,
                all.slice(0, d.n_train),
                all.slice(d.n_train, d.n_test),
            )
        }
        DataSource::Corpus => {
            let path = d.corpus.as_ref().ok_or_else(|| Error::Config("data.corpus is unset".into()))?;
            let mut lines = read_corpus(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            lines.shuffle(&mut stream(cfg.run.seed, Purpose::Split, Phase::Pretrain, 0));
            lines.truncate(d.max_sentences);
            let n_test = ((lines.len() as f64 * d.test_fraction).round() as usize).max(1);
            if lines.len() < n_test + 1 {
                return Err(Error::Config(format!("corpus {} has too few sentences", path.display())));
            }
            let (test_lines, train_lines) = lines.split_at(n_test);
            let vocab = build_vocab(train_lines, m.vocab_size)?;
            let train = SequenceBatch::encode_lines(&vocab, train_lines, m.max_len)?;
            let test = SequenceBatch::encode_lines(&vocab, test_lines, m.max_len)?;
            (vocab, train, test)
        }
    };
    let n_refs = test.len().min(d.max_references);
    let references = (0..n_refs).map(|i| test.content(i).to_vec()).collect();
    let embeddings = match &d.embeddings {
        Some(p) if p.exists() => {
            let mut rng = stream(cfg.run.seed, Purpose::Embeddings, Phase::Pretrain, 0);
            Some(load_embeddings(p, &vocab, m.d_model, &mut rng)?)
        }
        Some(p) => return Err(Error::Config(format!("missing embedding file {}", p.display()))),
        None => None,
    };
    Ok(Dataset {
        vocab,
        train,
        test,
        references,
        embeddings,
    })
}

/// Collapse flag of a record: mostly empty or near-identical samples.
pub fn is_collapsed(r: &MetricsRecord) -> bool {
    r.empty_fraction > crate::metrics::COLLAPSE_EMPTY_FRACTION
        || r.self_bleu[0].is_some_and(|s| s > crate::metrics::COLLAPSE_SELF_BLEU)
}

fn order_key(phase: Phase, iteration: usize) -> (u8, usize) {
    (phase as u8, iteration)
}

pub struct Runner {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub gen: Generator,
    pub disc: DiscriminatorLM,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
    pub baseline: EmaBaseline,
    /// Phase and last completed iteration.
    pub phase: Phase,
    pub iteration: usize,
    pub records: Vec<MetricsRecord>,
}

impl Runner {
    /// Fresh run; (re)creates the output directory's log files.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = prepare_data(&cfg)?;
        let dims = cfg.model.dims(data.vocab.len());
        let seed = cfg.run.seed;
        let mut gen = Generator::new(cfg.model.variant, dims, stream(seed, Purpose::GenInit, Phase::Pretrain, 0).random())?;
        gen.encoder_input = cfg.model.encoder_input;
        if let Some(e) = &data.embeddings {
            gen.set_embeddings(&e.table)?;
        }
        let disc = DiscriminatorLM::new(
            dims.vocab_size,
            cfg.model.disc_width(),
            dims.max_len,
            stream(seed, Purpose::DiscInit, Phase::Pretrain, 0).random(),
        );
        let opt_gen = Adam::new(cfg.train.mle_lr(cfg.model.variant), &gen.store);
        let opt_disc = Adam::new(cfg.train.lr_d, &disc.store);
        let runner = Runner {
            cfg,
            data,
            gen,
            disc,
            opt_gen,
            opt_disc,
            baseline: EmaBaseline::default(),
            phase: Phase::Pretrain,
            iteration: 0,
            records: Vec::new(),
        };
        runner.init_output(None)?;
        Ok(runner)
    }

    /// Restores a run from `ck`. Logs in the output directory keep only rows
    /// up to the checkpoint, so the stream continues where it left off.
    pub fn from_checkpoint(cfg: RunConfig, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let man = &ck.manifest;
        if man.config.model.variant != cfg.model.variant {
            return Err(Error::Contract(format!(
                "checkpoint holds a {} generator but the config asks for {}",
                man.config.model.variant, cfg.model.variant
            )));
        }
        let data = prepare_data(&cfg)?;
        let dims = cfg.model.dims(data.vocab.len());
        if man.dims != dims || man.disc_width != cfg.model.disc_width() {
            return Err(Error::Contract("checkpoint model dimensions differ from the config".into()));
        }
        if man.vocab != data.vocab.tokens() {
            return Err(Error::Contract("checkpoint vocabulary differs from the configured data".into()));
        }
        let mut gen = Generator::new(cfg.model.variant, dims, 0)?;
        gen.encoder_input = cfg.model.encoder_input;
        gen.store.load_values(ck.with_prefix("gen."))?;
        let mut disc = DiscriminatorLM::new(dims.vocab_size, cfg.model.disc_width(), dims.max_len, 0);
        disc.store.load_values(ck.with_prefix("disc."))?;
        let lookup = |n: &str| ck.get(n).cloned();
        let mut opt_disc = Adam::new(cfg.train.lr_d, &disc.store);
        opt_disc.load_state(&disc.store, "opt.disc", lookup)?;
        let opt_gen = match man.phase {
            Phase::Pretrain if man.iteration >= cfg.train.pretrain_iters => Adam::new(cfg.train.lr_adv_g, &gen.store),
            phase => {
                let lr = if phase == Phase::Pretrain { cfg.train.mle_lr(cfg.model.variant) } else { cfg.train.lr_adv_g };
                let mut opt = Adam::new(lr, &gen.store);
                opt.load_state(&gen.store, "opt.gen", lookup)?;
                opt
            }
        };
        let (phase, iteration) = if man.phase == Phase::Pretrain && man.iteration >= cfg.train.pretrain_iters {
            (Phase::Adversarial, 0)
        } else {
            (man.phase, man.iteration)
        };
        let runner = Runner {
            cfg,
            data,
            gen,
            disc,
            opt_gen,
            opt_disc,
            baseline: EmaBaseline { value: man.baseline },
            phase,
            iteration,
            records: Vec::new(),
        };
        runner.init_output(Some((man.phase, man.iteration)))?;
        Ok(runner)
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.run.out_dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }

    fn init_output(&self, keep_until: Option<(Phase, usize)>) -> Result<()> {
        fs::create_dir_all(self.out_dir().join("checkpoints"))?;
        fs::write(self.path(CONFIG_FILE), self.cfg.to_toml_string())?;
        if self.path(DIAGNOSTIC_CKPT).exists() {
            fs::remove_file(self.path(DIAGNOSTIC_CKPT))?;
        }
        let seed_line = format!("# seed={}\n", self.cfg.run.seed);
        let limit = keep_until.map(|(p, i)| order_key(p, i));
        let keep = |line: &str, sep: char| -> bool {
            let mut f = line.split(sep);
            let (Some(p), Some(i)) = (f.next(), f.next()) else { return false };
            match (p.parse::<Phase>(), i.parse::<usize>(), limit) {
                (Ok(p), Ok(i), Some(lim)) => order_key(p, i) <= lim,
                _ => false,
            }
        };
        let rewrite = |name: &str, header: &str, sep: char| -> Result<()> {
            let old = fs::read_to_string(self.path(name)).unwrap_or_default();
            let mut text = header.to_string();
            for line in old.lines().filter(|l| keep(l, sep)) {
                text.push_str(line);
                text.push('\n');
            }
            fs::write(self.path(name), text)?;
            Ok(())
        };
        rewrite(METRICS_FILE, &format!("{CSV_HEADER}\n"), ',')?;
        rewrite(SAMPLES_FILE, &format!("{seed_line}phase\titeration\tindex\ttext\n"), '\t')?;
        rewrite(COLLAPSE_FILE, "phase,iteration,empty_fraction,sbleu2,flagged\n", ',')?;
        Ok(())
    }

    fn append(&self, name: &str, text: &str) -> Result<()> {
        let mut f = OpenOptions::new().append(true).create(true).open(self.path(name))?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }

    /// Snapshot of the whole training state.
    pub fn checkpoint(&self, diagnostic: bool) -> Result<Checkpoint> {
        let mut named: Vec<(String, Tensor)> = Vec::new();
        named.extend(self.gen.store.iter().map(|(n, t)| (n.to_string(), t.clone())));
        named.extend(self.disc.store.iter().map(|(n, t)| (n.to_string(), t.clone())));
        named.extend(self.opt_gen.state(&self.gen.store, "opt.gen"));
        named.extend(self.opt_disc.state(&self.disc.store, "opt.disc"));
        let manifest = Manifest {
            config: self.cfg.clone(),
            seed: self.cfg.run.seed,
            dims: self.gen.dims,
            disc_width: self.cfg.model.disc_width(),
            phase: self.phase,
            iteration: self.iteration,
            vocab: self.data.vocab.tokens().to_vec(),
            baseline: self.baseline.value,
            diagnostic,
            tensors: Vec::new(),
        };
        Checkpoint::new(manifest, named)
    }

    fn save_checkpoint(&self, name: &str) -> Result<()> {
        self.checkpoint(false)?.save(&self.path(name))
    }

    /// Writes `diagnostic.ckpt` and returns the numerical error.
    fn abort(&self, op: &'static str) -> Error {
        if let Ok(ck) = self.checkpoint(true) {
            let _ = ck.save(&self.path(DIAGNOSTIC_CKPT));
        }
        Error::NonFinite { op }
    }

    /// Numerical errors raised below the loss checks still leave a diagnostic dump.
    fn guard(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { op } if !self.path(DIAGNOSTIC_CKPT).exists() => self.abort(op),
            e => e,
        }
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_samples: self.cfg.train.eval_samples,
            batch_size: self.cfg.train.eval_batch,
            seed: stream(self.cfg.run.seed, Purpose::Eval, self.phase, self.iteration).random(),
        }
    }

    /// Evaluates the generator at the current point and logs the record.
    pub fn evaluate_now(&mut self) -> Result<MetricsRecord> {
        let refs = BleuReference::new(&self.data.references, 5)?;
        let (record, samples) = evaluate(&self.gen, &self.data.test, &refs, &self.eval_config(), self.phase, self.iteration)?;
        self.append(METRICS_FILE, &format!("{}\n", record.to_csv_row()))?;
        self.append(SAMPLES_FILE, &self.sample_lines(&samples))?;
        if self.phase == Phase::Adversarial {
            let row = format!(
                "{},{},{:.6},{},{}\n",
                self.phase,
                self.iteration,
                record.empty_fraction,
                record.self_bleu[0].map_or("nan".to_string(), |v| format!("{v:.6}")),
                is_collapsed(&record)
            );
            self.append(COLLAPSE_FILE, &row)?;
        }
        self.records.push(record.clone());
        Ok(record)
    }

    fn sample_lines(&self, samples: &SampleOutput) -> String {
        let mut out = String::new();
        for (i, text) in samples.tokens.decode_all(&self.data.vocab).iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{i}\t{}\n", self.phase, self.iteration, text.replace('\t', " ")));
        }
        out
    }

    fn apply(&mut self, mut grads: Grads, op: &'static str) -> Result<()> {
        if !grads.is_finite() {
            return Err(self.abort(op));
        }
        if let Some(c) = self.cfg.train.clip() {
            grads.clip_norm(c);
        }
        self.opt_gen.step(&mut self.gen.store, &grads);
        if !self.gen.store.iter().all(|(_, t)| t.is_finite()) {
            return Err(self.abort("adam_step"));
        }
        Ok(())
    }

    fn maybe_checkpoint(&self, last: usize, final_name: &str) -> Result<()> {
        let every = self.cfg.train.checkpoint_every;
        if every > 0 && self.iteration % every == 0 {
            self.save_checkpoint(&format!("checkpoints/{}-{:04}.ckpt", self.phase, self.iteration))?;
        }
        if self.iteration == last {
            self.save_checkpoint(final_name)?;
        }
        Ok(())
    }

    /// MLE pretraining up to `pretrain_iters`; returns the records logged.
    pub fn pretrain(&mut self) -> Result<Vec<MetricsRecord>> {
        if self.phase != Phase::Pretrain {
            return Err(Error::Contract("pretraining already finished for this run".into()));
        }
        let start = self.records.len();
        let last = self.cfg.train.pretrain_iters;
        if self.iteration == 0 {
            self.evaluate_now()?;
            if last == 0 {
                self.save_checkpoint(PRETRAIN_CKPT)?;
            }
        }
        while self.iteration < last {
            self.iteration += 1;
            self.mle_iteration().map_err(|e| self.guard(e))?;
            if self.cfg.train.is_eval_point(self.iteration, last) {
                self.evaluate_now().map_err(|e| self.guard(e))?;
            }
            self.maybe_checkpoint(last, PRETRAIN_CKPT)?;
        }
        Ok(self.records[start..].to_vec())
    }

    fn mle_iteration(&mut self) -> Result<()> {
        let t = &self.cfg.train;
        let (seed, it) = (self.cfg.run.seed, self.iteration);
        self.opt_gen.lr = t.mle_lr(self.cfg.model.variant) * t.warmup_factor(it);
        let mut rng = stream(seed, Purpose::Batches, Phase::Pretrain, it);
        let mut drop_rng = stream(seed, Purpose::Dropout, Phase::Pretrain, it);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng);
        let bs = t.batch_size.min(order.len());
        let (bpi, p, guard) = (t.batches_per_iter, self.cfg.model.dropout, t.nan_guard);
        for b in 0..bpi {
            let lo = (b * bs) % order.len();
            let idx: Vec<usize> = (0..bs).map(|k| order[(lo + k) % order.len()]).collect();
            let batch = self.data.train.select(&idx);
            let source = self.gen.draw_source(batch.len(), &mut rng);
            let grads = {
                let mut s = Session::new(&self.gen.store).with_dropout(p, drop_rng.random()).with_nan_guard(guard);
                let loss = match self.gen.mle_loss(&mut s, &batch, &source) {
                    Ok(l) => l,
                    Err(Error::NonFinite { op }) => return Err(self.abort(op)),
                    Err(e) => return Err(e),
                };
                if !s.value(loss)[0].is_finite() {
                    return Err(self.abort("mle_loss"));
                }
                s.backward(loss)?
            };
            self.apply(grads, "mle_loss")?;
        }
        Ok(())
    }

    /// Adversarial training up to `adv_iters`; returns the records logged.
    pub fn adversarial(&mut self) -> Result<Vec<MetricsRecord>> {
        if self.phase == Phase::Pretrain {
            if self.iteration < self.cfg.train.pretrain_iters {
                return Err(Error::Contract("adversarial training needs a finished pretraining phase".into()));
            }
            self.phase = Phase::Adversarial;
            self.iteration = 0;
            self.opt_gen = Adam::new(self.cfg.train.lr_adv_g, &self.gen.store);
        }
        let start = self.records.len();
        let last = self.cfg.train.adv_iters;
        if self.iteration == 0 {
            self.evaluate_now()?;
            if last == 0 {
                self.save_checkpoint(ADVERSARIAL_CKPT)?;
            }
        }
        while self.iteration < last {
            self.iteration += 1;
            self.adversarial_iteration().map_err(|e| self.guard(e))?;
            if self.cfg.train.is_eval_point(self.iteration, last) {
                self.evaluate_now().map_err(|e| self.guard(e))?;
            }
            self.maybe_checkpoint(last, ADVERSARIAL_CKPT)?;
        }
        Ok(self.records[start..].to_vec())
    }

    fn adversarial_iteration(&mut self) -> Result<()> {
        let t = self.cfg.train.clone();
        let (seed, it) = (self.cfg.run.seed, self.iteration);
        let warm = t.warmup_factor(it);
        self.opt_gen.lr = t.lr_adv_g * warm;
        self.opt_disc.lr = t.lr_d * warm;
        let rcfg = t.reward_config();
        let mut rng = stream(seed, Purpose::Policy, Phase::Adversarial, it);
        for _ in 0..t.g_steps {
            let samples = self.gen.sample(t.batch_size, &mut rng, SampleMode::Multinomial)?;
            let rewards = compute_rewards(&self.disc, &samples, &rcfg, &mut self.baseline)?;
            let grads = {
                let mut s = Session::new(&self.gen.store).with_nan_guard(t.nan_guard);
                let loss = policy_gradient_loss(&mut s, &self.gen, &samples, &rewards)?;
                if !s.value(loss)[0].is_finite() {
                    return Err(self.abort("policy_gradient_loss"));
                }
                s.backward(loss)?
            };
            self.apply(grads, "policy_gradient_loss")?;
        }
        let mut rng = stream(seed, Purpose::Disc, Phase::Adversarial, it);
        for _ in 0..t.d_steps {
            let fake = self.gen.sample(t.batch_size, &mut rng, SampleMode::Multinomial)?.tokens;
            let idx: Vec<usize> = (0..t.batch_size).map(|_| rng.random_range(0..self.data.train.len())).collect();
            let real = self.data.train.select(&idx);
            match train_discriminator_step(&mut self.disc, &real, &fake, &mut self.opt_disc, t.clip()) {
                Ok(_) => {}
                Err(Error::NonFinite { op }) => return Err(self.abort(op)),
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

/// MLE pretraining from scratch; the records are also appended to
/// `metrics.csv` in the output directory.
pub fn run_pretrain(cfg: &RunConfig) -> Result<Vec<MetricsRecord>> {
    Runner::new(cfg.clone())?.pretrain()
}

/// Adversarial training starting from (or resuming) `pretrained`.
pub fn run_adversarial(cfg: &RunConfig, pretrained: &Checkpoint) -> Result<Vec<MetricsRecord>> {
    let mut r = Runner::from_checkpoint(cfg.clone(), pretrained)?;
    if r.phase == Phase::Pretrain {
        r.pretrain()?;
    }
    r.adversarial()
}

/// Generator and vocabulary stored in a checkpoint.
pub fn generator_from_checkpoint(ck: &Checkpoint) -> Result<(Generator, Vocabulary)> {
    let man = &ck.manifest;
    let mut gen = Generator::new(man.config.model.variant, man.dims, 0)?;
    gen.encoder_input = man.config.model.encoder_input;
    gen.store.load_values(ck.with_prefix("gen."))?;
    let vocab = Vocabulary::from_tokens(man.vocab.iter().skip(crate::data::NUM_RESERVED).cloned())?;
    if vocab.tokens() != man.vocab.as_slice() || vocab.len() != man.dims.vocab_size {
        return Err(Error::Contract("checkpoint vocabulary does not match its model".into()));
    }
    Ok((gen, vocab))
}

/// Reads back a run directory's metric stream.
pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
    parse_csv(&text)
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub variant: VariantTag,
    pub dir: PathBuf,
    pub records: Vec<MetricsRecord>,
}

impl RunSummary {
    /// Last record of a phase.
    pub fn last(&self, phase: Phase) -> Option<&MetricsRecord> {
        self.records.iter().rev().find(|r| r.phase == phase)
    }

    pub fn collapsed(&self) -> bool {
        self.last(Phase::Adversarial).is_some_and(is_collapsed)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub id: u8,
    pub transformer: RunSummary,
    pub lstm: RunSummary,
}

/// Full pretrain + adversarial run of one configuration, with its report.
pub fn run_full(cfg: &RunConfig) -> Result<RunSummary> {
    let mut r = Runner::new(cfg.clone())?;
    r.pretrain()?;
    r.adversarial()?;
    emit_report(r.out_dir())?;
    Ok(RunSummary {
        variant: cfg.model.variant,
        dir: r.out_dir().to_path_buf(),
        records: r.records,
    })
}

/// Canned experiment: the Transformer variant and the LSTM baseline under
/// one budget, each in its own subdirectory of `out_root`, plus paired plots.
/// `adjust` may edit both configs before they run.
pub fn run_experiment_with(
    id: u8,
    scale: Scale,
    data_dir: &Path,
    out_root: &Path,
    seed: u64,
    adjust: impl Fn(&mut RunConfig),
) -> Result<ExperimentOutcome> {
    let variant = experiment_variant(id)?;
    let mut runs = Vec::new();
    for v in [variant, VariantTag::Lstm] {
        let mut cfg = experiment_config(id, scale, v, data_dir, &out_root.join(v.to_string()))?;
        cfg.run.seed = seed;
        adjust(&mut cfg);
        cfg.validate()?;
        runs.push(run_full(&cfg)?);
    }
    let lstm = runs.pop().expect("two runs");
    let transformer = runs.pop().expect("two runs");
    emit_comparison(
        &[(transformer.variant.to_string(), transformer.dir.clone()), ("lstm".to_string(), lstm.dir.clone())],
        out_root,
    )?;
    let mut summary = File::create(out_root.join("summary.txt"))?;
    writeln!(summary, "experiment {id} scale {scale:?} seed {seed}")?;
    for r in [&transformer, &lstm] {
        for phase in [Phase::Pretrain, Phase::Adversarial] {
            if let Some(rec) = r.last(phase) {
                writeln!(
                    summary,
                    "{}\t{}\titer {}\tnll_gen {}\tsbleu2 {}\tempty {:.3}\tcollapsed {}",
                    r.variant,
                    phase,
                    rec.iteration,
                    rec.nll_gen.map_or("nan".into(), |v| format!("{v:.4}")),
                    rec.self_bleu[0].map_or("nan".into(), |v| format!("{v:.4}")),
                    rec.empty_fraction,
                    is_collapsed(rec)
                )?;
            }
        }
    }
    Ok(ExperimentOutcome { id, transformer, lstm })
}

pub fn run_experiment(id: u8, scale: Scale, data_dir: &Path, out_root: &Path, seed: u64) -> Result<ExperimentOutcome> {
    run_experiment_with(id, scale, data_dir, out_root, seed, |_| {})
}
