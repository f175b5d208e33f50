//! Vocabularies, corpus ingestion, the random-LSTM oracle, embedding
//! loading and batching.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::layers::LstmCell;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{multinomial_sample, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Whitespace tokenisation with lowercasing; punctuation stays attached.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        if index.len() != tokens.len() {
            return contract("duplicate token in vocabulary");
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Vocabulary of `size` ids whose content tokens are named `w4`, `w5`, ...
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= NUM_RESERVED {
            return contract(format!("synthetic vocabulary needs more than {NUM_RESERVED} ids"));
        }
        Self::from_tokens((NUM_RESERVED..size).map(|i| format!("w{i}")))
    }

    /// Rebuilds the lookup table after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED_TOKENS[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Keeps the `max_size − 4` most frequent tokens, ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(lines: &[S], max_size: usize) -> Result<Vocabulary> {
    if max_size <= NUM_RESERVED {
        return contract(format!("vocabulary max_size must exceed {NUM_RESERVED}"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in lines {
        for tok in tokenize(line.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return contract("cannot build a vocabulary from an empty corpus");
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_RESERVED);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// Content ids truncated to `max_len − 1`, followed by eos.
pub fn encode(v: &Vocabulary, sentence: &str, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokenize(sentence)
        .iter()
        .take(max_len.saturating_sub(1))
        .map(|t| v.id(t))
        .collect();
    ids.push(EOS);
    ids
}

/// Joins tokens up to the first eos, skipping pad and bos.
pub fn decode(v: &Vocabulary, ids: &[usize]) -> String {
    ids.iter()
        .take_while(|&&id| id != EOS)
        .filter(|&&id| id != PAD && id != BOS)
        .map(|&id| v.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Row-major `[batch × max_len]` token matrix. Row `i` holds `lengths[i]`
/// content tokens, then eos when it fits, then pad. Content may hold any id
/// but eos; generated rows can contain pad or bos if a model emits them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl SequenceBatch {
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S], max_len: usize) -> Result<Self> {
        let mut tokens = Vec::with_capacity(seqs.len() * max_len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let content: Vec<usize> = s.as_ref().iter().copied().take_while(|&t| t != EOS).collect();
            if content.len() > max_len {
                return contract(format!("sequence of length {} exceeds max_len {max_len}", content.len()));
            }
            lengths.push(content.len());
            tokens.extend_from_slice(&content);
            if content.len() < max_len {
                tokens.push(EOS);
                tokens.extend(std::iter::repeat_n(PAD, max_len - content.len() - 1));
            }
        }
        Ok(SequenceBatch { tokens, lengths, max_len })
    }

    pub fn encode_lines<S: AsRef<str>>(v: &Vocabulary, lines: &[S], max_len: usize) -> Result<Self> {
        let seqs: Vec<Vec<usize>> = lines.iter().map(|l| encode(v, l.as_ref(), max_len)).collect();
        Self::from_sequences(&seqs, max_len)
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.max_len..(i + 1) * self.max_len]
    }

    pub fn content(&self, i: usize) -> &[usize] {
        &self.row(i)[..self.lengths[i]]
    }

    /// Scored positions of row `i`: the content plus its eos, if present.
    pub fn effective_len(&self, i: usize) -> usize {
        (self.lengths[i] + 1).min(self.max_len)
    }

    pub fn select(&self, idx: &[usize]) -> SequenceBatch {
        let mut tokens = Vec::with_capacity(idx.len() * self.max_len);
        for &i in idx {
            tokens.extend_from_slice(self.row(i));
        }
        SequenceBatch {
            tokens,
            lengths: idx.iter().map(|&i| self.lengths[i]).collect(),
            max_len: self.max_len,
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> SequenceBatch {
        self.select(&(start..start + len).collect::<Vec<_>>())
    }

    pub fn decode_all(&self, v: &Vocabulary) -> Vec<String> {
        (0..self.len()).map(|i| decode(v, self.content(i))).collect()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.len() != self.lengths.len() * self.max_len {
            return contract("token matrix does not match batch size × max_len");
        }
        for i in 0..self.len() {
            let len = self.lengths[i];
            if len > self.max_len {
                return contract(format!("row {i} length {len} exceeds max_len"));
            }
            let row = self.row(i);
            if let Some(&bad) = row.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::Index {
                    what: "token",
                    index: bad,
                    bound: vocab_size,
                });
            }
            if row[..len].contains(&EOS) {
                return contract(format!("row {i} has eos inside its content"));
            }
            if len < self.max_len && (row[len] != EOS || row[len + 1..].iter().any(|&t| t != PAD)) {
                return contract(format!("row {i} is not terminated by eos then pad"));
            }
        }
        Ok(())
    }
}

fn default_oracle_width() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub seq_len: usize,
    #[serde(default = "default_oracle_width")]
    pub hidden: usize,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            seed: 0,
            vocab_size: 5000,
            seq_len: 20,
            hidden: 32,
        }
    }
}

/// Fixed random-weight LSTM language model. It only ever emits content ids,
/// so its sequences always have length `seq_len`.
#[derive(Clone, Debug)]
pub struct Oracle {
    pub spec: OracleSpec,
    store: ParamStore,
    embed: ParamId,
    cell: LstmCell,
    out_w: ParamId,
    out_b: ParamId,
}

impl Oracle {
    pub fn new(spec: &OracleSpec) -> Result<Self> {
        if spec.vocab_size <= NUM_RESERVED || spec.seq_len == 0 || spec.hidden == 0 {
            return contract("oracle needs vocab_size > 4, seq_len ≥ 1 and hidden ≥ 1");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (v, h) = (spec.vocab_size, spec.hidden);
        let mut store = ParamStore::new();
        let embed = store.add_normal("oracle.embed", &[v, h], 1.0, &mut rng);
        let cell = LstmCell::new_normal(&mut store, "oracle.lstm", h, h, 1.0, &mut rng);
        let out_w = store.add_normal("oracle.out.w", &[h, v], 1.0, &mut rng);
        let out_b = store.add_normal("oracle.out.b", &[v], 1.0, &mut rng);
        Ok(Oracle {
            spec: spec.clone(),
            store,
            embed,
            cell,
            out_w,
            out_b,
        })
    }

    /// Log-probabilities over content ids for each of `n` rows, with reserved
    /// ids at −∞. Runs the cell on `inputs` from `state`.
    fn step(
        &self,
        s: &mut Session,
        inputs: &[usize],
        state: (crate::tensor::Var, crate::tensor::Var),
    ) -> Result<((crate::tensor::Var, crate::tensor::Var), Vec<f32>)> {
        let table = s.param(self.embed);
        let x = s.embedding(table, inputs)?;
        let state = self.cell.step(s, x, state)?;
        let (w, b) = (s.param(self.out_w), s.param(self.out_b));
        let logits = s.matmul(state.0, w)?;
        let logits = s.add_row(logits, b)?;
        let v = self.spec.vocab_size;
        let mut lp = vec![f32::NEG_INFINITY; inputs.len() * v];
        for (row, out) in s.value(logits).chunks(v).zip(lp.chunks_mut(v)) {
            let content = &row[NUM_RESERVED..];
            let max = content.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + content.iter().map(|&x| (x - max).exp()).sum::<f32>().ln();
            for (o, &x) in out[NUM_RESERVED..].iter_mut().zip(content) {
                *o = x - lse;
            }
        }
        Ok((state, lp))
    }

    /// Samples `n` sequences of length `seq_len` at temperature 1.
    pub fn generate_with(&self, n: usize, rng: &mut impl Rng) -> Result<SequenceBatch> {
        if n == 0 {
            return contract("oracle_generate needs n ≥ 1");
        }
        let (v, l) = (self.spec.vocab_size, self.spec.seq_len);
        let mut s = Session::inference(&self.store);
        let mut state = self.cell.zero_state(&mut s, n)?;
        let mut prev = vec![BOS; n];
        let mut tokens = vec![PAD; n * l];
        let mut probs = vec![0.0f32; v];
        for t in 0..l {
            let (next, lp) = self.step(&mut s, &prev, state)?;
            state = next;
            for i in 0..n {
                for (p, &x) in probs.iter_mut().zip(&lp[i * v..(i + 1) * v]) {
                    *p = x.exp();
                }
                let tok = multinomial_sample(&probs, rng);
                tokens[i * l + t] = tok;
                prev[i] = tok;
            }
        }
        Ok(SequenceBatch {
            tokens,
            lengths: vec![l; n],
            max_len: l,
        })
    }

    /// Teacher-forced per-token log-probabilities `[b × L]` of the content
    /// tokens; positions past each row's content are 0.
    pub fn log_prob(&self, seqs: &SequenceBatch) -> Result<Vec<f32>> {
        if seqs.is_empty() {
            return contract("log_prob of an empty batch");
        }
        seqs.validate(self.spec.vocab_size)?;
        let (n, l, v) = (seqs.len(), seqs.max_len, self.spec.vocab_size);
        let mut s = Session::inference(&self.store);
        let mut state = self.cell.zero_state(&mut s, n)?;
        let mut prev = vec![BOS; n];
        let mut out = vec![0.0f32; n * l];
        for t in 0..l {
            let (next, lp) = self.step(&mut s, &prev, state)?;
            state = next;
            for i in 0..n {
                let tok = seqs.row(i)[t];
                if t < seqs.lengths[i] {
                    out[i * l + t] = lp[i * v + tok];
                }
                prev[i] = if tok == PAD || tok == EOS { BOS } else { tok };
            }
        }
        Ok(out)
    }

    /// Mean over rows of the summed content negative log-likelihood.
    pub fn nll(&self, seqs: &SequenceBatch) -> Result<f64> {
        let lp = self.log_prob(seqs)?;
        Ok(-lp.iter().map(|&x| x as f64).sum::<f64>() / seqs.len() as f64)
    }
}

/// Samples `n` oracle sequences; the sampling stream is derived from the seed,
/// so equal specs give equal corpora.
pub fn oracle_generate(spec: &OracleSpec, n: usize) -> Result<SequenceBatch> {
    let oracle = Oracle::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    oracle.generate_with(n, &mut rng)
}

#[derive(Clone, Debug)]
pub struct Embeddings {
    pub table: Tensor,
    pub coverage: f64,
}

/// Reads word vectors in text format (`token x1 .. xd` per line, optional
/// `count dim` header). Tokens absent from the file get N(0, 0.1²) rows.
/// Coverage counts non-reserved ids only.
pub fn load_embeddings(path: &Path, v: &Vocabulary, d: usize, rng: &mut impl Rng) -> Result<Embeddings> {
    let text = std::fs::read_to_string(path)?;
    parse_embeddings(&text, v, d, rng)
}

pub fn parse_embeddings(text: &str, v: &Vocabulary, d: usize, rng: &mut impl Rng) -> Result<Embeddings> {
    let normal = Normal::new(0.0f32, 0.1).expect("valid std");
    let mut data: Vec<f32> = (0..v.len() * d).map(|_| normal.sample(rng)).collect();
    let mut found = vec![false; v.len()];
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            if fields[1] != d.to_string() {
                return Err(Error::Format {
                    line: lineno,
                    msg: format!("header dimension {} does not match {d}", fields[1]),
                });
            }
            continue;
        }
        if fields.len() != d + 1 {
            return Err(Error::Format {
                line: lineno,
                msg: format!("expected token and {d} values, found {} values", fields.len() - 1),
            });
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f32>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| Error::Format {
                line: lineno,
                msg: "unparseable number".into(),
            })?;
        if let Some(id) = v.lookup(fields[0]) {
            data[id * d..(id + 1) * d].copy_from_slice(&values);
            found[id] = true;
        }
    }
    let content = v.len().saturating_sub(NUM_RESERVED);
    let covered = found.iter().skip(NUM_RESERVED).filter(|&&f| f).count();
    Ok(Embeddings {
        table: Tensor::new(vec![v.len(), d], data)?,
        coverage: if content == 0 { 0.0 } else { covered as f64 / content as f64 },
    })
}

/// One shuffled epoch of batches; the final partial batch is included.
pub fn batch_iter<'a>(
    data: &'a SequenceBatch,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<impl Iterator<Item = SequenceBatch> + 'a> {
    if batch_size == 0 {
        return contract("batch_size must be ≥ 1");
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| data.select(&idx)))
}

/// Reads a one-sentence-per-line corpus, skipping blank lines.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}
