//! Run configuration: TOML with `[model]`, `[data]`, `[train]` and `[run]`
//! sections, plus the canned experiment presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::RewardConfig;
use crate::error::{Error, Result};
use crate::generators::{EncoderInput, VariantTag};
use crate::layers::ModelDims;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: VariantTag,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Exact size for oracle data; upper bound for corpus vocabularies.
    pub vocab_size: usize,
    pub dropout: f32,
    /// Discriminator LSTM width; 0 means `d_model`.
    pub disc_width: usize,
    /// Encoder input of the encoder-decoder variants during MLE.
    pub encoder_input: EncoderInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ModelDims::default();
        ModelConfig {
            variant: VariantTag::Lstm,
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_head: d.d_head,
            d_ff: d.d_ff,
            max_len: d.max_len,
            vocab_size: d.vocab_size,
            dropout: 0.1,
            disc_width: 0,
            encoder_input: EncoderInput::Noise,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_head: self.d_head,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size,
        }
    }

    pub fn disc_width(&self) -> usize {
        if self.disc_width == 0 {
            self.d_model
        } else {
            self.disc_width
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Oracle,
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub oracle_seed: u64,
    pub oracle_hidden: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Corpus subsample cap (after a seeded shuffle).
    pub max_sentences: usize,
    pub test_fraction: f64,
    /// Cap on the BLEU reference split.
    pub max_references: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Oracle,
            oracle_seed: 7,
            oracle_hidden: 32,
            n_train: 10_000,
            n_test: 1000,
            corpus: None,
            embeddings: None,
            max_sentences: 10_000,
            test_fraction: 0.1,
            max_references: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_iters: usize,
    pub adv_iters: usize,
    pub batches_per_iter: usize,
    pub batch_size: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    /// MLE learning rate; unset picks 1e-2 for the LSTM and 1e-3 otherwise.
    pub lr_mle: Option<f32>,
    pub lr_adv_g: f32,
    pub lr_d: f32,
    pub lambda_word: f32,
    pub lambda_sent: f32,
    pub clip_rewards: bool,
    pub reward_floor: f32,
    pub normalize_rewards: bool,
    pub baseline_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Linear learning-rate warmup length in iterations; 0 disables it.
    pub warmup_iters: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub eval_samples: usize,
    pub eval_batch: usize,
    /// Abort on the first op that produces a non-finite value.
    pub nan_guard: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_iters: 120,
            adv_iters: 120,
            batches_per_iter: 4,
            batch_size: 64,
            g_steps: 1,
            d_steps: 3,
            lr_mle: None,
            lr_adv_g: 1e-4,
            lr_d: 1e-3,
            lambda_word: 0.5,
            lambda_sent: 0.5,
            clip_rewards: true,
            reward_floor: -10.0,
            normalize_rewards: false,
            baseline_decay: 0.95,
            grad_clip: 5.0,
            warmup_iters: 0,
            eval_every: 10,
            checkpoint_every: 30,
            eval_samples: 200,
            eval_batch: 128,
            nan_guard: false,
        }
    }
}

impl TrainConfig {
    pub fn mle_lr(&self, variant: VariantTag) -> f32 {
        self.lr_mle.unwrap_or(if variant == VariantTag::Lstm { 1e-2 } else { 1e-3 })
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            lambda_word: self.lambda_word,
            lambda_sent: self.lambda_sent,
            floor: self.clip_rewards.then_some(self.reward_floor),
            normalize: self.normalize_rewards,
            ema_decay: self.baseline_decay,
        }
    }

    pub fn clip(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }

    /// Learning-rate multiplier for 1-based iteration `iter`.
    pub fn warmup_factor(&self, iter: usize) -> f32 {
        if self.warmup_iters == 0 {
            1.0
        } else {
            (iter as f32 / self.warmup_iters as f32).min(1.0)
        }
    }

    /// Evaluation points: 0, 1, every `eval_every`, and the last iteration.
    pub fn is_eval_point(&self, iter: usize, last: usize) -> bool {
        iter <= 1 || iter == last || (self.eval_every > 0 && iter % self.eval_every == 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub run: RunSection,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        self.model
            .dims(m.vocab_size)
            .validate()
            .map_err(|e| bad(e.to_string()))?;
        if m.variant != VariantTag::Lstm && m.d_model % 2 != 0 {
            return Err(bad("Transformer variants need an even d_model"));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(bad("dropout must lie in [0, 1)"));
        }
        let d = &self.data;
        match d.source {
            DataSource::Oracle => {
                if d.n_train == 0 || d.n_test == 0 {
                    return Err(bad("oracle data needs n_train ≥ 1 and n_test ≥ 1"));
                }
                if m.vocab_size <= crate::data::NUM_RESERVED {
                    return Err(bad("oracle vocab_size must exceed the 4 reserved ids"));
                }
            }
            DataSource::Corpus => {
                if d.corpus.is_none() {
                    return Err(bad("data.source = \"corpus\" needs data.corpus"));
                }
                if !(0.0..1.0).contains(&d.test_fraction) || d.test_fraction == 0.0 {
                    return Err(bad("test_fraction must lie in (0, 1)"));
                }
            }
        }
        let t = &self.train;
        if t.batch_size == 0 || t.batches_per_iter == 0 {
            return Err(bad("batch_size and batches_per_iter must be ≥ 1"));
        }
        if t.eval_samples < 2 || t.eval_batch == 0 {
            return Err(bad("eval_samples must be ≥ 2 and eval_batch ≥ 1"));
        }
        t.reward_config().validate().map_err(|e| bad(e.to_string()))?;
        for (name, lr) in [("lr_adv_g", t.lr_adv_g), ("lr_d", t.lr_d), ("lr_mle", t.mle_lr(m.variant))] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(bad(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(bad(format!("unknown scale {s:?} (expected desk or paper)"))),
        }
    }
}

/// Canned configuration for experiment `id` with the given generator variant.
/// `data_dir` holds `captions.txt` and `embeddings.txt`.
pub fn experiment_config(id: u8, scale: Scale, variant: VariantTag, data_dir: &Path, out_dir: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.model.variant = variant;
    cfg.run.out_dir = out_dir.to_path_buf();
    let desk = scale == Scale::Desk;
    let t = &mut cfg.train;
    t.pretrain_iters = if desk { 50 } else { 120 };
    t.adv_iters = if desk { 50 } else { 120 };
    match id {
        1 => {
            cfg.data.source = DataSource::Oracle;
            cfg.model.max_len = 20;
            cfg.model.vocab_size = if desk { 100 } else { 5000 };
            cfg.data.n_train = if desk { 2000 } else { 10_000 };
            cfg.data.n_test = if desk { 200 } else { 1000 };
        }
        2 | 3 => {
            cfg.data.source = DataSource::Corpus;
            cfg.model.max_len = 24;
            cfg.model.vocab_size = 5000;
            cfg.data.corpus = Some(data_dir.join("captions.txt"));
            if id == 2 {
                cfg.data.embeddings = Some(data_dir.join("embeddings.txt"));
            }
            cfg.data.max_sentences = if desk { 4000 } else { 10_000 };
            cfg.data.max_references = if desk { 1000 } else { 5000 };
        }
        _ => return Err(bad(format!("unknown experiment id {id} (expected 1, 2 or 3)"))),
    }
    if desk {
        cfg.train.batch_size = 32;
        cfg.train.eval_samples = 100;
    }
    for p in [&cfg.data.corpus, &cfg.data.embeddings].into_iter().flatten() {
        if !p.exists() {
            return Err(bad(format!("missing data file {}", p.display())));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Transformer variant studied by each experiment.
pub fn experiment_variant(id: u8) -> Result<VariantTag> {
    match id {
        1 => Ok(VariantTag::EncoderOnly),
        2 => Ok(VariantTag::EncDecEmptyTarget),
        3 => Ok(VariantTag::EncDecShiftedTarget),
        _ => Err(bad(format!("unknown experiment id {id} (expected 1, 2 or 3)"))),
    }
}
