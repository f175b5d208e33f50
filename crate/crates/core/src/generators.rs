//! The four generator variants, their scoring paths and the two sampling
//! regimes (parallel multinomial and word-by-word autoregressive).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SequenceBatch, BOS, EOS, NUM_RESERVED, PAD};
use crate::error::{contract, Error, Result};
use crate::layers::{positional_encoding, AttentionMask, DecoderLayer, EncoderLayer, Linear, LstmCell, ModelDims};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{argmax, multinomial_sample, Tensor, Var};

pub const IGNORE: usize = usize::MAX;
const HEAD_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantTag {
    #[default]
    #[serde(rename = "lstm")]
    Lstm,
    #[serde(rename = "encoder-only")]
    EncoderOnly,
    #[serde(rename = "encdec-empty")]
    EncDecEmptyTarget,
    #[serde(rename = "encdec-shifted")]
    EncDecShiftedTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Parallel,
    Autoregressive,
}

impl VariantTag {
    pub const ALL: [VariantTag; 4] = [
        VariantTag::Lstm,
        VariantTag::EncoderOnly,
        VariantTag::EncDecEmptyTarget,
        VariantTag::EncDecShiftedTarget,
    ];

    pub fn is_causal(self) -> bool {
        matches!(self, VariantTag::Lstm | VariantTag::EncDecShiftedTarget)
    }

    pub fn regime(self) -> Regime {
        if self.is_causal() {
            Regime::Autoregressive
        } else {
            Regime::Parallel
        }
    }

    /// Whether the variant conditions on a random-token source sequence.
    pub fn uses_source(self) -> bool {
        self != VariantTag::Lstm
    }

    pub fn is_transformer(self) -> bool {
        self != VariantTag::Lstm
    }
}

impl std::str::FromStr for VariantTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        VariantTag::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown generator variant {s:?}")))
    }
}

impl std::fmt::Display for VariantTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            VariantTag::Lstm => "lstm",
            VariantTag::EncoderOnly => "encoder-only",
            VariantTag::EncDecEmptyTarget => "encdec-empty",
            VariantTag::EncDecShiftedTarget => "encdec-shifted",
        };
        f.write_str(s)
    }
}

/// What the encoder of an encoder-decoder variant reads during MLE.
/// Scoring and sampling always read the random-token source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderInput {
    /// The same random-token source used at sampling time.
    #[default]
    Noise,
    /// The training sentence itself, with key padding. Leaks every future
    /// token to the decoder through cross-attention.
    Sentence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SampleMode {
    #[default]
    Multinomial,
    /// Temperature → 0 diagnostic: always take the most likely token.
    Argmax,
}

/// Random-token source rows `[b × L]` drawn uniformly from content ids.
/// Empty for variants without a source.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Source(pub Vec<usize>);

impl Source {
    pub fn draw(tag: VariantTag, n: usize, max_len: usize, vocab_size: usize, rng: &mut impl Rng) -> Source {
        if !tag.uses_source() {
            return Source::default();
        }
        Source((0..n * max_len).map(|_| rng.random_range(NUM_RESERVED..vocab_size)).collect())
    }

    pub fn select(&self, max_len: usize, idx: &[usize]) -> Source {
        if self.0.is_empty() {
            return Source::default();
        }
        Source(idx.iter().flat_map(|&i| self.0[i * max_len..(i + 1) * max_len].iter().copied()).collect())
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub tokens: SequenceBatch,
    /// `[b × L]`; zero past each row's effective positions.
    pub per_token_log_prob: Vec<f32>,
    pub source: Source,
}

impl SampleOutput {
    pub fn lengths(&self) -> &[usize] {
        &self.tokens.lengths
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Body {
    Lstm(LstmCell),
    Encoder(Vec<EncoderLayer>),
    EncDec(Vec<EncoderLayer>, Vec<DecoderLayer>),
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub tag: VariantTag,
    pub dims: ModelDims,
    pub store: ParamStore,
    pub embed: ParamId,
    pub head: Linear,
    pub encoder_input: EncoderInput,
    body: Body,
    pe: Tensor,
}

/// Teacher-forcing input for each row: bos followed by the row shifted right.
fn shifted_inputs(batch: &SequenceBatch) -> Vec<usize> {
    let l = batch.max_len;
    let mut out = Vec::with_capacity(batch.tokens.len());
    for i in 0..batch.len() {
        out.push(BOS);
        out.extend_from_slice(&batch.row(i)[..l - 1]);
    }
    out
}

/// Targets with non-effective positions replaced by [`IGNORE`].
pub fn effective_targets(batch: &SequenceBatch) -> Vec<usize> {
    let l = batch.max_len;
    let mut out = vec![IGNORE; batch.tokens.len()];
    for i in 0..batch.len() {
        let e = batch.effective_len(i);
        out[i * l..i * l + e].copy_from_slice(&batch.row(i)[..e]);
    }
    out
}

impl Generator {
    pub fn new(tag: VariantTag, dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = dims.d_model;
        let embed = store.add_normal("gen.embed", &[dims.vocab_size, d], 1.0, &mut rng);
        let body = match tag {
            VariantTag::Lstm => Body::Lstm(LstmCell::new(&mut store, "gen.lstm", d, d, &mut rng)),
            VariantTag::EncoderOnly => Body::Encoder(
                (0..dims.n_layers)
                    .map(|i| EncoderLayer::new(&mut store, &format!("gen.enc{i}"), &dims, &mut rng))
                    .collect(),
            ),
            VariantTag::EncDecEmptyTarget | VariantTag::EncDecShiftedTarget => {
                let enc = (0..dims.n_layers)
                    .map(|i| EncoderLayer::new(&mut store, &format!("gen.enc{i}"), &dims, &mut rng))
                    .collect();
                let dec = (0..dims.n_layers)
                    .map(|i| DecoderLayer::new(&mut store, &format!("gen.dec{i}"), &dims, &mut rng))
                    .collect();
                Body::EncDec(enc, dec)
            }
        };
        let head = Linear::with_normal(&mut store, "gen.head", d, dims.vocab_size, HEAD_STD, &mut rng);
        let pe = if tag.is_transformer() {
            positional_encoding(dims.max_len, d)?
        } else {
            Tensor::zeros(&[0])
        };
        Ok(Generator {
            tag,
            dims,
            store,
            embed,
            head,
            encoder_input: EncoderInput::default(),
            body,
            pe,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.dims.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.dims.max_len
    }

    /// Replaces the token embedding table, e.g. with pretrained vectors.
    pub fn set_embeddings(&mut self, table: &Tensor) -> Result<()> {
        let current = self.store.get(self.embed);
        if table.shape() != current.shape() {
            return Err(Error::Shape {
                op: "set_embeddings",
                lhs: table.shape().to_vec(),
                rhs: current.shape().to_vec(),
            });
        }
        self.store.get_mut(self.embed).data_mut().copy_from_slice(table.data());
        Ok(())
    }

    pub fn draw_source(&self, n: usize, rng: &mut impl Rng) -> Source {
        Source::draw(self.tag, n, self.max_len(), self.vocab_size(), rng)
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        if batch.is_empty() {
            return contract("empty batch");
        }
        if batch.max_len != self.max_len() {
            return Err(Error::Shape {
                op: "generator_batch",
                lhs: vec![batch.len(), batch.max_len],
                rhs: vec![batch.len(), self.max_len()],
            });
        }
        batch.validate(self.vocab_size())
    }

    fn check_source(&self, source: &Source, n: usize) -> Result<()> {
        let want = if self.tag.uses_source() { n * self.max_len() } else { 0 };
        if source.0.len() != want {
            return Err(Error::Shape {
                op: "generator_source",
                lhs: vec![source.0.len()],
                rhs: vec![want],
            });
        }
        if let Some(&bad) = source.0.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::Index {
                what: "source token",
                index: bad,
                bound: self.vocab_size(),
            });
        }
        Ok(())
    }

    /// Token embeddings plus positions, `[b × l × d]`.
    fn embed_positions(&self, s: &mut Session, ids: &[usize], b: usize, l: usize) -> Result<Var> {
        let d = self.dims.d_model;
        let table = s.param(self.embed);
        let e = s.embedding(table, ids)?;
        let e = s.reshape(e, &[b, l, d])?;
        let pe = self.positions(s, b, l)?;
        s.add(e, pe)
    }

    fn positions(&self, s: &mut Session, b: usize, l: usize) -> Result<Var> {
        let d = self.dims.d_model;
        let rows = &self.pe.data()[..l * d];
        s.constant(&[b, l, d], rows.repeat(b))
    }

    fn encoder(&self) -> &[EncoderLayer] {
        match &self.body {
            Body::Encoder(enc) | Body::EncDec(enc, _) => enc,
            Body::Lstm(_) => &[],
        }
    }

    fn run_encoder(&self, s: &mut Session, ids: &[usize], b: usize, mask: &AttentionMask) -> Result<Var> {
        let l = ids.len() / b;
        let mut x = self.embed_positions(s, ids, b, l)?;
        for layer in self.encoder() {
            x = layer.forward(s, x, mask)?;
        }
        Ok(x)
    }

    fn run_decoder(&self, s: &mut Session, target: Var, memory: Var, memory_mask: Option<&AttentionMask>) -> Result<Var> {
        let Body::EncDec(_, dec) = &self.body else {
            return contract("decoder requested on a variant without one");
        };
        let (lt, lm) = (s.shape(target)[1], s.shape(memory)[1]);
        let causal = AttentionMask::causal(lt);
        let full = AttentionMask::full(lt, lm);
        let memory_mask = memory_mask.unwrap_or(&full);
        let mut y = target;
        for layer in dec {
            y = layer.forward(s, y, memory, &causal, memory_mask)?;
        }
        Ok(y)
    }

    /// Decoder target for `b` rows of length `l`.
    fn decoder_target(&self, s: &mut Session, inputs: &[usize], b: usize, l: usize) -> Result<Var> {
        match self.tag {
            // zero embeddings: only the positions remain
            VariantTag::EncDecEmptyTarget => self.positions(s, b, l),
            _ => self.embed_positions(s, inputs, b, l),
        }
    }

    fn lstm_unroll(&self, s: &mut Session, cell: &LstmCell, inputs: &[usize], b: usize, l: usize) -> Result<Var> {
        let d = self.dims.d_model;
        let table = s.param(self.embed);
        let mut state = cell.zero_state(s, b)?;
        let mut hs = Vec::with_capacity(l);
        let mut col = vec![0usize; b];
        for t in 0..l {
            for (i, c) in col.iter_mut().enumerate() {
                *c = inputs[i * l + t];
            }
            let x = s.embedding(table, &col)?;
            state = cell.step(s, x, state)?;
            hs.push(s.reshape(state.0, &[b, 1, d])?);
        }
        s.concat(&hs, 1)
    }

    /// Hidden states `[b × L × d]` on the path used for scoring and sampling.
    fn scoring_hidden(&self, s: &mut Session, batch: &SequenceBatch, source: &Source) -> Result<Var> {
        let (b, l) = (batch.len(), batch.max_len);
        match &self.body {
            Body::Lstm(cell) => self.lstm_unroll(s, cell, &shifted_inputs(batch), b, l),
            // every position reads only the source: the sentence is never seen
            Body::Encoder(_) => self.run_encoder(s, &source.0, b, &AttentionMask::full(l, l)),
            Body::EncDec(..) => {
                let memory = self.run_encoder(s, &source.0, b, &AttentionMask::full(l, l))?;
                let target = self.decoder_target(s, &shifted_inputs(batch), b, l)?;
                self.run_decoder(s, target, memory, None)
            }
        }
    }

    /// Next-token logits `[b × L × V]` for maximum-likelihood training.
    ///
    /// The LSTM trains on the scoring path. The encoder-only variant's
    /// unmasked encoder reads the shifted sentence, so each position can
    /// attend to the very tokens it is asked to predict. With
    /// [`EncoderInput::Sentence`] the encoder-decoder variants encode the
    /// sentence itself and the decoder can read it through cross-attention.
    pub fn forward_mle(&self, s: &mut Session, batch: &SequenceBatch, source: &Source) -> Result<Var> {
        self.check_batch(batch)?;
        self.check_source(source, batch.len())?;
        let (b, l) = (batch.len(), batch.max_len);
        let lens: Vec<usize> = (0..b).map(|i| batch.effective_len(i)).collect();
        let h = match &self.body {
            Body::Encoder(_) => {
                let mask = AttentionMask::key_padding(l, l, &lens);
                self.run_encoder(s, &shifted_inputs(batch), b, &mask)?
            }
            Body::EncDec(..) if self.encoder_input == EncoderInput::Sentence => {
                let mask = AttentionMask::key_padding(l, l, &lens);
                let memory = self.run_encoder(s, &batch.tokens, b, &mask)?;
                let target = self.decoder_target(s, &shifted_inputs(batch), b, l)?;
                self.run_decoder(s, target, memory, Some(&mask))?
            }
            _ => self.scoring_hidden(s, batch, source)?,
        };
        self.head.forward(s, h)
    }

    /// Mean token cross-entropy over effective positions.
    pub fn mle_loss(&self, s: &mut Session, batch: &SequenceBatch, source: &Source) -> Result<Var> {
        let logits = self.forward_mle(s, batch, source)?;
        let flat = s.reshape(logits, &[batch.tokens.len(), self.vocab_size()])?;
        s.cross_entropy(flat, &effective_targets(batch), IGNORE)
    }

    /// Per-token log-probabilities `[b·L]` of `batch` on the tape, teacher
    /// forced along the scoring path. Non-effective positions hold arbitrary
    /// values and must be weighted out by the caller.
    pub fn score(&self, s: &mut Session, batch: &SequenceBatch, source: &Source) -> Result<Var> {
        self.check_batch(batch)?;
        self.check_source(source, batch.len())?;
        let h = self.scoring_hidden(s, batch, source)?;
        let logits = self.head.forward(s, h)?;
        let flat = s.reshape(logits, &[batch.tokens.len(), self.vocab_size()])?;
        let lp = s.log_softmax(flat)?;
        s.pick(lp, &batch.tokens)
    }

    /// Per-token log-probabilities `[b × L]`, zero outside effective positions.
    pub fn log_prob(&self, batch: &SequenceBatch, source: &Source) -> Result<Vec<f32>> {
        let mut s = Session::inference(&self.store);
        let v = self.score(&mut s, batch, source)?;
        let mut out = s.value(v).to_vec();
        mask_effective(&mut out, batch);
        Ok(out)
    }

    /// Samples `n` sequences with the variant's own regime.
    pub fn sample(&self, n: usize, rng: &mut impl Rng, mode: SampleMode) -> Result<SampleOutput> {
        match self.tag.regime() {
            Regime::Parallel => self.sample_parallel(n, rng, mode),
            Regime::Autoregressive => self.sample_autoregressive(n, rng, mode),
        }
    }

    /// One forward pass over fresh source noise; each position is drawn
    /// independently from its own softmax row.
    pub fn sample_parallel(&self, n: usize, rng: &mut impl Rng, mode: SampleMode) -> Result<SampleOutput> {
        if self.tag.is_causal() {
            return contract(format!(
                "sample_parallel is not defined for the causal {} variant; use sample_autoregressive",
                self.tag
            ));
        }
        if n == 0 {
            return contract("sample count must be ≥ 1");
        }
        let (l, v) = (self.max_len(), self.vocab_size());
        let source = self.draw_source(n, rng);
        let mut s = Session::inference(&self.store);
        // the scoring path never reads the target tokens for these variants
        let placeholder = SequenceBatch {
            tokens: vec![EOS; n * l],
            lengths: vec![0; n],
            max_len: l,
        };
        let h = self.scoring_hidden(&mut s, &placeholder, &source)?;
        let logits = self.head.forward(&mut s, h)?;
        let flat = s.reshape(logits, &[n * l, v])?;
        let lp = s.log_softmax(flat)?;
        let lp = s.value(lp);
        let mut seqs = Vec::with_capacity(n);
        let mut per_token = vec![0.0f32; n * l];
        let mut probs = vec![0.0f32; v];
        for i in 0..n {
            let mut seq = Vec::with_capacity(l);
            for t in 0..l {
                let row = &lp[(i * l + t) * v..(i * l + t + 1) * v];
                let tok = draw(row, &mut probs, rng, mode);
                per_token[i * l + t] = row[tok];
                if tok == EOS {
                    break;
                }
                seq.push(tok);
            }
            seqs.push(seq);
        }
        let tokens = SequenceBatch::from_sequences(&seqs, l)?;
        Ok(SampleOutput {
            tokens,
            per_token_log_prob: per_token,
            source,
        })
    }

    /// Left-to-right sampling that feeds every generated token back, either
    /// through the LSTM state or as the growing decoder target prefix.
    pub fn sample_autoregressive(&self, n: usize, rng: &mut impl Rng, mode: SampleMode) -> Result<SampleOutput> {
        if self.tag == VariantTag::EncoderOnly {
            return contract("the encoder-only variant has no autoregressive path; use sample_parallel");
        }
        if n == 0 {
            return contract("sample count must be ≥ 1");
        }
        let (l, v) = (self.max_len(), self.vocab_size());
        let source = self.draw_source(n, rng);
        let mut s = Session::inference(&self.store);
        let mut seqs: Vec<Vec<usize>> = vec![Vec::with_capacity(l); n];
        let mut done = vec![false; n];
        let mut per_token = vec![0.0f32; n * l];
        let mut probs = vec![0.0f32; v];
        let mut prefix = vec![BOS; n];

        let mut lstm_state = match &self.body {
            Body::Lstm(cell) => Some(cell.zero_state(&mut s, n)?),
            _ => None,
        };
        // Each decoder step gets its own tape; only the encoder output carries over.
        let memory = match &self.body {
            Body::EncDec(..) => {
                let mut enc = Session::inference(&self.store);
                let m = self.run_encoder(&mut enc, &source.0, n, &AttentionMask::full(l, l))?;
                Some(enc.to_tensor(m))
            }
            _ => None,
        };

        for t in 0..l {
            let h = match &self.body {
                Body::Lstm(cell) => {
                    let table = s.param(self.embed);
                    let col: Vec<usize> = (0..n).map(|i| prefix[i * (t + 1) + t]).collect();
                    let x = s.embedding(table, &col)?;
                    let st = cell.step(&mut s, x, lstm_state.take().expect("lstm state"))?;
                    lstm_state = Some(st);
                    st.0
                }
                _ => {
                    s = Session::inference(&self.store);
                    let memory = s.leaf(memory.as_ref().expect("encoder memory"));
                    let target = self.decoder_target(&mut s, &prefix, n, t + 1)?;
                    let y = self.run_decoder(&mut s, target, memory, None)?;
                    let last = s.slice(y, 1, t, 1)?;
                    s.reshape(last, &[n, self.dims.d_model])?
                }
            };
            let logits = self.head.forward(&mut s, h)?;
            let lp = s.log_softmax(logits)?;
            let lp = s.value(lp).to_vec();
            let mut next = Vec::with_capacity(n * (t + 2));
            for i in 0..n {
                let mut tok = PAD;
                if !done[i] {
                    let row = &lp[i * v..(i + 1) * v];
                    tok = draw(row, &mut probs, rng, mode);
                    per_token[i * l + t] = row[tok];
                    if tok == EOS {
                        done[i] = true;
                    } else {
                        seqs[i].push(tok);
                    }
                }
                next.extend_from_slice(&prefix[i * (t + 1)..(i + 1) * (t + 1)]);
                next.push(tok);
            }
            prefix = next;
            if done.iter().all(|&d| d) {
                break;
            }
        }
        let tokens = SequenceBatch::from_sequences(&seqs, l)?;
        Ok(SampleOutput {
            tokens,
            per_token_log_prob: per_token,
            source,
        })
    }

    /// Largest change in the logits at positions `0..=j` when content token
    /// `j` of every row is replaced. Zero (up to rounding) for a model that
    /// cannot see the future during training.
    pub fn causality_violation(&self, batch: &SequenceBatch, source: &Source, j: usize) -> Result<f32> {
        if j >= batch.max_len || batch.lengths.iter().any(|&len| len <= j) {
            return contract("perturbed position must lie inside every row's content");
        }
        let run = |b: &SequenceBatch| -> Result<Vec<f32>> {
            let mut s = Session::inference(&self.store);
            let out = self.forward_mle(&mut s, b, source)?;
            Ok(s.value(out).to_vec())
        };
        let mut pert = batch.clone();
        let v = self.vocab_size();
        for i in 0..batch.len() {
            let tok = &mut pert.tokens[i * batch.max_len + j];
            *tok = NUM_RESERVED + (tok.saturating_sub(NUM_RESERVED) + 1) % (v - NUM_RESERVED);
        }
        let (a, b) = (run(batch)?, run(&pert)?);
        let l = batch.max_len;
        let mut worst = 0.0f32;
        for i in 0..batch.len() {
            for t in 0..=j {
                let off = (i * l + t) * v;
                for k in off..off + v {
                    worst = worst.max((a[k] - b[k]).abs());
                }
            }
        }
        Ok(worst)
    }
}

fn draw(log_probs: &[f32], probs: &mut [f32], rng: &mut impl Rng, mode: SampleMode) -> usize {
    match mode {
        SampleMode::Argmax => argmax(log_probs),
        SampleMode::Multinomial => {
            for (p, &x) in probs.iter_mut().zip(log_probs) {
                *p = x.exp();
            }
            multinomial_sample(probs, rng)
        }
    }
}

/// Zeroes entries of a `[b × L]` buffer outside each row's effective positions.
pub fn mask_effective(values: &mut [f32], batch: &SequenceBatch) {
    let l = batch.max_len;
    for i in 0..batch.len() {
        let e = batch.effective_len(i);
        values[i * l + e..(i + 1) * l].fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(v: usize, l: usize) -> ModelDims {
        ModelDims {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_head: 8,
            d_ff: 32,
            max_len: l,
            vocab_size: v,
        }
    }

    fn random_batch(n: usize, l: usize, v: usize, full: bool, rng: &mut ChaCha8Rng) -> SequenceBatch {
        let seqs: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let len = if full { l } else { rng.random_range(0..l) };
                (0..len).map(|_| rng.random_range(NUM_RESERVED..v)).collect()
            })
            .collect();
        SequenceBatch::from_sequences(&seqs, l).unwrap()
    }

    fn uniform(tag: VariantTag, v: usize, l: usize) -> Generator {
        let mut g = Generator::new(tag, dims(v, l), 0).unwrap();
        g.store.get_mut(g.head.w).data_mut().fill(0.0);
        g
    }

    #[test]
    fn mle_logits_shape_for_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(3, 6, 20, false, &mut rng);
        for tag in VariantTag::ALL {
            let g = Generator::new(tag, dims(20, 6), 1).unwrap();
            let src = g.draw_source(3, &mut rng);
            let mut s = Session::new(&g.store);
            let out = g.forward_mle(&mut s, &batch, &src).unwrap();
            assert_eq!(s.shape(out), &[3, 6, 20], "{tag}");
        }
    }

    #[test]
    fn out_of_range_token_is_index_error() {
        let g = Generator::new(VariantTag::Lstm, dims(10, 4), 0).unwrap();
        let batch = SequenceBatch {
            tokens: vec![12, EOS, PAD, PAD],
            lengths: vec![1],
            max_len: 4,
        };
        let mut s = Session::new(&g.store);
        assert!(matches!(g.forward_mle(&mut s, &batch, &Source::default()), Err(Error::Index { .. })));
    }

    #[test]
    fn fresh_generators_are_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = 100;
        let batch = random_batch(16, 10, v, false, &mut rng);
        for tag in VariantTag::ALL {
            let g = Generator::new(tag, dims(v, 10), 2).unwrap();
            let src = g.draw_source(16, &mut rng);
            let mut s = Session::new(&g.store);
            let loss = g.mle_loss(&mut s, &batch, &src).unwrap();
            let nll = s.value(loss)[0] as f64;
            let ln_v = (v as f64).ln();
            assert!((nll - ln_v).abs() < 0.05 * ln_v, "{tag}: {nll}");
        }
    }

    #[test]
    fn uniform_generator_log_prob_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for tag in VariantTag::ALL {
            let g = uniform(tag, 10, 5);
            let batch = random_batch(4, 5, 10, true, &mut rng);
            let lp = g.log_prob(&batch, &g.draw_source(4, &mut rng)).unwrap();
            for x in lp {
                assert!((x + 10f32.ln()).abs() < 1e-5, "{tag}: {x}");
            }
        }
    }

    #[test]
    fn duplicate_rows_score_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for tag in VariantTag::ALL {
            let g = Generator::new(tag, dims(15, 6), 4).unwrap();
            let one = random_batch(1, 6, 15, false, &mut rng);
            let two = one.select(&[0, 0]);
            let src = g.draw_source(1, &mut rng).select(6, &[0, 0]);
            let lp = g.log_prob(&two, &src).unwrap();
            assert_eq!(lp[..6], lp[6..], "{tag}");
            assert!(lp.iter().all(|&x| x <= 0.0));
        }
    }

    #[test]
    fn causality_by_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for tag in VariantTag::ALL {
            let g = Generator::new(tag, dims(12, 7), 6).unwrap();
            let batch = random_batch(4, 7, 12, true, &mut rng);
            let src = g.draw_source(4, &mut rng);
            let worst = (1..7).map(|j| g.causality_violation(&batch, &src, j).unwrap()).fold(0.0f32, f32::max);
            if tag == VariantTag::EncoderOnly {
                assert!(worst > 1e-6, "{tag} should see the future");
            } else {
                assert!(worst <= 1e-6, "{tag}: {worst}");
            }
        }
    }

    #[test]
    fn sentence_encoder_leaks_the_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for tag in [VariantTag::EncDecEmptyTarget, VariantTag::EncDecShiftedTarget] {
            let mut g = Generator::new(tag, dims(12, 7), 6).unwrap();
            g.encoder_input = EncoderInput::Sentence;
            let batch = random_batch(4, 7, 12, true, &mut rng);
            let src = g.draw_source(4, &mut rng);
            assert!(g.causality_violation(&batch, &src, 3).unwrap() > 1e-4, "{tag}");
            // the scoring path never reads the sentence through the encoder
            let mut s = Session::inference(&g.store);
            let a = g.score(&mut s, &batch, &src).unwrap();
            let a = s.value(a).to_vec();
            g.encoder_input = EncoderInput::Noise;
            let mut s = Session::inference(&g.store);
            let b = g.score(&mut s, &batch, &src).unwrap();
            assert_eq!(a, s.value(b));
        }
    }

    #[test]
    fn parallel_sampling_contract() {
        for tag in [VariantTag::EncoderOnly, VariantTag::EncDecEmptyTarget] {
            let g = Generator::new(tag, dims(30, 16), 7).unwrap();
            let out = g.sample_parallel(4, &mut ChaCha8Rng::seed_from_u64(8), SampleMode::Multinomial).unwrap();
            assert_eq!(out.tokens.tokens.len(), 4 * 16);
            out.tokens.validate(30).unwrap();
            let lp = g.log_prob(&out.tokens, &out.source).unwrap();
            for (a, b) in lp.iter().zip(&out.per_token_log_prob) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
            let a = g.sample_parallel(3, &mut ChaCha8Rng::seed_from_u64(9), SampleMode::Argmax).unwrap();
            let b = g.sample_parallel(3, &mut ChaCha8Rng::seed_from_u64(9), SampleMode::Argmax).unwrap();
            assert_eq!(a.tokens, b.tokens);
        }
        let g = Generator::new(VariantTag::Lstm, dims(30, 8), 0).unwrap();
        assert!(g.sample_parallel(2, &mut ChaCha8Rng::seed_from_u64(0), SampleMode::Multinomial).is_err());
    }

    #[test]
    fn autoregressive_sampling_matches_scoring() {
        for tag in [VariantTag::Lstm, VariantTag::EncDecShiftedTarget] {
            let g = Generator::new(tag, dims(25, 9), 10).unwrap();
            let out = g.sample_autoregressive(6, &mut ChaCha8Rng::seed_from_u64(11), SampleMode::Multinomial).unwrap();
            out.tokens.validate(25).unwrap();
            let again = g.sample_autoregressive(6, &mut ChaCha8Rng::seed_from_u64(11), SampleMode::Multinomial).unwrap();
            assert_eq!(out.tokens, again.tokens);
            assert_eq!(out.per_token_log_prob, again.per_token_log_prob);
            let lp = g.log_prob(&out.tokens, &out.source).unwrap();
            for (a, b) in lp.iter().zip(&out.per_token_log_prob) {
                assert!((a - b).abs() <= 1e-5, "{tag}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rigged_eos_gives_empty_sentences() {
        for tag in VariantTag::ALL {
            let mut g = Generator::new(tag, dims(20, 8), 12).unwrap();
            g.store.get_mut(g.head.b).data_mut()[EOS] = 100.0;
            let out = g.sample(5, &mut ChaCha8Rng::seed_from_u64(13), SampleMode::Multinomial).unwrap();
            assert!(out.lengths().iter().all(|&l| l == 0), "{tag}");
            assert!(out.tokens.tokens.chunks(8).all(|r| r[0] == EOS && r[1..].iter().all(|&t| t == PAD)));
        }
    }
}
