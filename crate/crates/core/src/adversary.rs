//! Language-model discriminator, log-likelihood rewards with an EMA
//! baseline, and the REINFORCE surrogate for the generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SequenceBatch, BOS};
use crate::error::{contract, Error, Result};
use crate::generators::{Generator, SampleOutput};
use crate::layers::{Linear, LstmCell};
use crate::params::{Adam, ParamId, ParamStore, Session};
use crate::tensor::Var;

/// Per-token floor applied to log D in both the discriminator loss and rewards.
pub const LOG_D_FLOOR: f32 = -10.0;

#[derive(Clone, Debug)]
pub struct DiscriminatorLM {
    pub store: ParamStore,
    embed: ParamId,
    cell: LstmCell,
    head: Linear,
    vocab_size: usize,
    max_len: usize,
}

impl DiscriminatorLM {
    pub fn new(vocab_size: usize, width: usize, max_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.add_normal("disc.embed", &[vocab_size, width], 1.0, &mut rng);
        let cell = LstmCell::new(&mut store, "disc.lstm", width, width, &mut rng);
        let head = Linear::with_normal(&mut store, "disc.head", width, vocab_size, 0.02, &mut rng);
        DiscriminatorLM {
            store,
            embed,
            cell,
            head,
            vocab_size,
            max_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Next-token log-probabilities `[b·L × V]` under teacher forcing.
    pub fn log_softmax(&self, s: &mut Session, seqs: &SequenceBatch) -> Result<Var> {
        if seqs.is_empty() {
            return contract("discriminator input batch is empty");
        }
        if seqs.max_len != self.max_len {
            return Err(Error::Shape {
                op: "discriminator_batch",
                lhs: vec![seqs.len(), seqs.max_len],
                rhs: vec![seqs.len(), self.max_len],
            });
        }
        seqs.validate(self.vocab_size)?;
        let (b, l, d) = (seqs.len(), seqs.max_len, self.cell.hidden);
        let table = s.param(self.embed);
        let mut state = self.cell.zero_state(s, b)?;
        let mut hs = Vec::with_capacity(l);
        for t in 0..l {
            let col: Vec<usize> = (0..b).map(|i| if t == 0 { BOS } else { seqs.row(i)[t - 1] }).collect();
            let x = s.embedding(table, &col)?;
            state = self.cell.step(s, x, state)?;
            hs.push(s.reshape(state.0, &[b, 1, d])?);
        }
        let h = s.concat(&hs, 1)?;
        let logits = self.head.forward(s, h)?;
        let flat = s.reshape(logits, &[b * l, self.vocab_size])?;
        s.log_softmax(flat)
    }

    /// Per-token `log D(y_t | y_<t)` `[b·L]` on the tape.
    pub fn token_log_probs(&self, s: &mut Session, seqs: &SequenceBatch) -> Result<Var> {
        let lp = self.log_softmax(s, seqs)?;
        s.pick(lp, &seqs.tokens)
    }
}

/// Per-token log D `[b × L]`, zero outside each row's content and eos.
pub fn d_log_likelihood(d: &DiscriminatorLM, seqs: &SequenceBatch) -> Result<Vec<f32>> {
    let mut s = Session::inference(&d.store);
    let v = d.token_log_probs(&mut s, seqs)?;
    let mut out = s.value(v).to_vec();
    crate::generators::mask_effective(&mut out, seqs);
    Ok(out)
}

/// `[b × L]` indicator of the content-plus-eos positions.
fn effective_mask(seqs: &SequenceBatch) -> Vec<f32> {
    let l = seqs.max_len;
    let mut m = vec![0.0f32; seqs.tokens.len()];
    for i in 0..seqs.len() {
        m[i * l..i * l + seqs.effective_len(i)].fill(1.0);
    }
    m
}

/// `L_D = −mean log D(real) + mean max(log D(fake), −10)`, means taken over
/// content-plus-eos positions of each batch.
pub fn discriminator_loss(s: &mut Session, d: &DiscriminatorLM, real: &SequenceBatch, fake: &SequenceBatch) -> Result<Var> {
    let term = |s: &mut Session, seqs: &SequenceBatch, sign: f32, floor: bool| -> Result<Var> {
        let lp = d.token_log_probs(s, seqs)?;
        let lp = if floor { s.clamp_min(lp, LOG_D_FLOOR)? } else { lp };
        let mask = effective_mask(seqs);
        let n = mask.iter().sum::<f32>().max(1.0);
        let w = mask.into_iter().map(|m| sign * m / n).collect();
        let weighted = s.mul_const(lp, w)?;
        s.sum(weighted)
    };
    let r = term(s, real, -1.0, false)?;
    let f = term(s, fake, 1.0, true)?;
    s.add(r, f)
}

/// One Adam step on the discriminator loss; returns the loss.
pub fn train_discriminator_step(
    d: &mut DiscriminatorLM,
    real: &SequenceBatch,
    fake: &SequenceBatch,
    opt: &mut Adam,
    clip: Option<f64>,
) -> Result<f32> {
    let (loss, mut grads) = {
        let mut s = Session::new(&d.store);
        let loss = discriminator_loss(&mut s, d, real, fake)?;
        let value = s.value(loss)[0];
        (value, s.backward(loss)?)
    };
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite { op: "discriminator_loss" });
    }
    if let Some(c) = clip {
        grads.clip_norm(c);
    }
    opt.step(&mut d.store, &grads);
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda_word: f32,
    pub lambda_sent: f32,
    /// Per-token floor on log D; `None` disables clipping.
    pub floor: Option<f32>,
    /// Standardise word rewards over the batch's effective positions.
    pub normalize: bool,
    pub ema_decay: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_word: 0.5,
            lambda_sent: 0.5,
            floor: Some(LOG_D_FLOOR),
            normalize: false,
            ema_decay: 0.95,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, s) = (self.lambda_word, self.lambda_sent);
        if w < 0.0 || s < 0.0 || ((w + s) - 1.0).abs() > 1e-6 {
            return contract(format!("reward mix must be non-negative and sum to 1, got ({w}, {s})"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return contract("baseline decay must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Exponential moving average of batch-mean sentence rewards. The first
/// observed batch initialises it exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmaBaseline {
    pub value: Option<f64>,
}

impl EmaBaseline {
    pub fn update(&mut self, batch_mean: f64, decay: f64) -> f64 {
        let v = match self.value {
            None => batch_mean,
            Some(prev) => decay * prev + (1.0 - decay) * batch_mean,
        };
        self.value = Some(v);
        v
    }
}

#[derive(Clone, Debug)]
pub struct RewardBatch {
    /// `[b × L]` log-likelihood units; zero where `weight` is zero.
    pub word_reward: Vec<f32>,
    pub sentence_reward: Vec<f32>,
    /// `[b × L]` training signal `λ_w·word + λ_s·sentence`.
    pub signal: Vec<f32>,
    /// `[b × L]` 1 on content-plus-eos positions of non-empty samples, else 0.
    pub weight: Vec<f32>,
    pub baseline: f32,
}

impl RewardBatch {
    pub fn effective_count(&self) -> usize {
        self.weight.iter().filter(|&&w| w > 0.0).count()
    }
}

/// Word rewards are per-token log D of the samples; empty samples carry
/// zero weight everywhere. The baseline is updated with this batch before use.
pub fn compute_rewards(
    d: &DiscriminatorLM,
    samples: &SampleOutput,
    cfg: &RewardConfig,
    baseline: &mut EmaBaseline,
) -> Result<RewardBatch> {
    cfg.validate()?;
    let seqs = &samples.tokens;
    let (b, l) = (seqs.len(), seqs.max_len);
    let mut word = d_log_likelihood(d, seqs)?;
    let mut weight = effective_mask(seqs);
    for i in 0..b {
        if seqs.lengths[i] == 0 {
            weight[i * l..(i + 1) * l].fill(0.0);
        }
    }
    for (w, &m) in word.iter_mut().zip(&weight) {
        *w = if m > 0.0 {
            cfg.floor.map_or(*w, |f| w.max(f))
        } else {
            0.0
        };
    }
    if cfg.normalize {
        let n = weight.iter().sum::<f32>() as f64;
        if n > 1.0 {
            let mean = word.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = word
                .iter()
                .zip(&weight)
                .map(|(&x, &m)| m as f64 * (x as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            let sd = var.sqrt().max(1e-8);
            for (x, &m) in word.iter_mut().zip(&weight) {
                if m > 0.0 {
                    *x = ((*x as f64 - mean) / sd) as f32;
                }
            }
        }
    }
    let mut sentence = vec![0.0f32; b];
    let mut nonempty = Vec::new();
    for i in 0..b {
        let n = weight[i * l..(i + 1) * l].iter().sum::<f32>();
        if n > 0.0 {
            let total: f64 = word[i * l..(i + 1) * l].iter().map(|&x| x as f64).sum();
            sentence[i] = (total / n as f64) as f32;
            nonempty.push(sentence[i] as f64);
        }
    }
    let base = if nonempty.is_empty() {
        baseline.value.unwrap_or(0.0)
    } else {
        let mean = nonempty.iter().sum::<f64>() / nonempty.len() as f64;
        baseline.update(mean, cfg.ema_decay)
    };
    let mut signal = vec![0.0f32; b * l];
    for i in 0..b {
        for t in 0..l {
            let k = i * l + t;
            if weight[k] > 0.0 {
                signal[k] = cfg.lambda_word * word[k] + cfg.lambda_sent * sentence[i];
            }
        }
    }
    if word.iter().chain(&signal).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "compute_rewards" });
    }
    Ok(RewardBatch {
        word_reward: word,
        sentence_reward: sentence,
        signal,
        weight,
        baseline: base as f32,
    })
}

/// `−(1/N) Σ (signal − baseline)·log p` over the `N` weighted positions, with
/// the signal held constant. Zero (with zero gradient) when `N = 0`.
pub fn policy_gradient_loss(s: &mut Session, g: &Generator, samples: &SampleOutput, rewards: &RewardBatch) -> Result<Var> {
    let n = samples.tokens.tokens.len();
    if rewards.signal.len() != n || rewards.weight.len() != n {
        return Err(Error::Shape {
            op: "policy_gradient_loss",
            lhs: vec![rewards.signal.len()],
            rhs: vec![n],
        });
    }
    let logp = g.score(s, &samples.tokens, &samples.source)?;
    let count = rewards.weight.iter().sum::<f32>().max(1.0);
    let coef = rewards
        .signal
        .iter()
        .zip(&rewards.weight)
        .map(|(&sig, &w)| -w * (sig - rewards.baseline) / count)
        .collect();
    let weighted = s.mul_const(logp, coef)?;
    s.sum(weighted)
}
