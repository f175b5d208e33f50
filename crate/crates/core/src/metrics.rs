//! Evaluation: sentence NLLs, smoothed sentence-level BLEU, self-BLEU,
//! distinct-n and the collapse probe, plus the metrics CSV record.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SequenceBatch;
use crate::error::{contract, Error, Result};
use crate::generators::{Generator, SampleMode, SampleOutput};

/// Numerator used in place of a zero clipped n-gram count.
pub const SMOOTHING: f64 = 0.1;

pub const CSV_HEADER: &str =
    "phase,iteration,nll_gen,nll_div,bleu2,bleu3,bleu4,bleu5,sbleu2,sbleu3,sbleu4,distinct1,distinct2,empty_fraction";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Adversarial,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Adversarial => "adversarial",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "adversarial" => Ok(Phase::Adversarial),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub phase: Phase,
    pub iteration: usize,
    pub nll_gen: Option<f64>,
    pub nll_div: Option<f64>,
    /// BLEU-2..5 against the reference split.
    pub bleu: [Option<f64>; 4],
    /// Self-BLEU-2..4 of the samples.
    pub self_bleu: [Option<f64>; 3],
    pub distinct_1: Option<f64>,
    pub distinct_2: Option<f64>,
    pub empty_fraction: f64,
}

fn cell(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:.6}"),
        _ => "nan".to_string(),
    }
}

fn parse_cell(s: &str, line: usize) -> Result<Option<f64>> {
    if s == "nan" {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::Format {
        line,
        msg: format!("bad number {s:?}"),
    })
}

impl MetricsRecord {
    pub const COLUMNS: usize = 14;

    pub fn to_csv_row(&self) -> String {
        let mut cols = vec![self.phase.to_string(), self.iteration.to_string(), cell(self.nll_gen), cell(self.nll_div)];
        cols.extend(self.bleu.iter().map(|&b| cell(b)));
        cols.extend(self.self_bleu.iter().map(|&b| cell(b)));
        cols.push(cell(self.distinct_1));
        cols.push(cell(self.distinct_2));
        cols.push(cell(Some(self.empty_fraction)));
        cols.join(",")
    }

    /// Value of a CSV column by header name.
    pub fn column(&self, name: &str) -> Option<f64> {
        match name {
            "iteration" => Some(self.iteration as f64),
            "nll_gen" => self.nll_gen,
            "nll_div" => self.nll_div,
            "bleu2" => self.bleu[0],
            "bleu3" => self.bleu[1],
            "bleu4" => self.bleu[2],
            "bleu5" => self.bleu[3],
            "sbleu2" => self.self_bleu[0],
            "sbleu3" => self.self_bleu[1],
            "sbleu4" => self.self_bleu[2],
            "distinct1" => self.distinct_1,
            "distinct2" => self.distinct_2,
            "empty_fraction" => Some(self.empty_fraction),
            _ => None,
        }
    }
}

/// Metric columns plotted by the report (everything but phase and iteration).
pub fn metric_columns() -> Vec<&'static str> {
    CSV_HEADER.split(',').skip(2).collect()
}

pub fn write_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(Error::Format {
                line: 1,
                msg: "missing or unexpected metrics header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != MetricsRecord::COLUMNS {
            return Err(Error::Format {
                line: lineno,
                msg: format!("expected {} columns, found {}", MetricsRecord::COLUMNS, f.len()),
            });
        }
        let p = |k: usize| parse_cell(f[k], lineno);
        out.push(MetricsRecord {
            phase: f[0].parse()?,
            iteration: f[1].parse().map_err(|_| Error::Format {
                line: lineno,
                msg: "bad iteration".into(),
            })?,
            nll_gen: p(2)?,
            nll_div: p(3)?,
            bleu: [p(4)?, p(5)?, p(6)?, p(7)?],
            self_bleu: [p(8)?, p(9)?, p(10)?],
            distinct_1: p(11)?,
            distinct_2: p(12)?,
            empty_fraction: p(13)?.unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}

/// Mean over sentences of the summed negative log-likelihood of each
/// sentence's content and eos. Encoder-bearing variants score every sentence
/// against its own source draw, fixed up front from `eval_seed`, so the value
/// does not depend on `batch_size`.
pub fn nll_gen(g: &Generator, held_out: &SequenceBatch, batch_size: usize, eval_seed: u64) -> Result<f64> {
    if held_out.is_empty() {
        return contract("nll_gen needs a non-empty held-out set");
    }
    if batch_size == 0 {
        return contract("batch_size must be ≥ 1");
    }
    let n = held_out.len();
    let source = g.draw_source(n, &mut ChaCha8Rng::seed_from_u64(eval_seed));
    let mut total = 0.0f64;
    let mut start = 0;
    while start < n {
        let len = batch_size.min(n - start);
        let idx: Vec<usize> = (start..start + len).collect();
        let lp = g.log_prob(&held_out.select(&idx), &source.select(g.max_len(), &idx))?;
        total -= lp.iter().map(|&x| x as f64).sum::<f64>();
        start += len;
    }
    Ok(total / n as f64)
}

/// Mean sentence NLL of the generator's own non-empty samples under itself;
/// `None` when every sample is empty.
pub fn sample_nll(samples: &SampleOutput) -> Option<f64> {
    let l = samples.tokens.max_len;
    let sums: Vec<f64> = (0..samples.len())
        .filter(|&i| samples.lengths()[i] > 0)
        .map(|i| -samples.per_token_log_prob[i * l..(i + 1) * l].iter().map(|&x| x as f64).sum::<f64>())
        .collect();
    (!sums.is_empty()).then(|| sums.iter().sum::<f64>() / sums.len() as f64)
}

pub fn nll_div(g: &Generator, n_samples: usize, seed: u64) -> Result<Option<f64>> {
    if n_samples == 0 {
        return contract("nll_div needs n_samples ≥ 1");
    }
    let samples = g.sample(n_samples, &mut ChaCha8Rng::seed_from_u64(seed), SampleMode::Multinomial)?;
    Ok(sample_nll(&samples))
}

fn ngram_counts<T: Hash + Eq>(seq: &[T], k: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= k {
        for w in seq.windows(k) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn closest_length(lengths: impl Iterator<Item = usize>, c: usize) -> usize {
    let mut best: Option<usize> = None;
    for r in lengths {
        best = match best {
            None => Some(r),
            Some(b) => {
                let (db, dr) = (b.abs_diff(c), r.abs_diff(c));
                Some(if dr < db || (dr == db && r < b) { r } else { b })
            }
        };
    }
    best.unwrap_or(0)
}

/// Smoothed sentence BLEU from per-order `(clipped, total)` counts. Orders
/// longer than the candidate have no n-grams and are left out, the remaining
/// orders sharing uniform weights.
fn sentence_bleu(counts: &[(usize, usize)], cand_len: usize, ref_len: usize) -> f64 {
    let orders = counts.len().min(cand_len).max(1);
    let log_p: f64 = counts[..orders]
        .iter()
        .map(|&(clipped, total)| {
            if clipped == 0 {
                (SMOOTHING / total.max(1) as f64).ln()
            } else {
                (clipped as f64 / total as f64).ln()
            }
        })
        .sum::<f64>()
        / orders as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    bp * log_p.exp()
}

/// Reference set with n-gram counts maximised over references, computed once.
pub struct BleuReference<'a, T> {
    max_counts: Vec<HashMap<&'a [T], usize>>,
    lengths: Vec<usize>,
}

impl<'a, T: Hash + Eq> BleuReference<'a, T> {
    pub fn new<S: AsRef<[T]>>(references: &'a [S], max_n: usize) -> Result<Self> {
        if references.is_empty() {
            return contract("BLEU needs at least one reference");
        }
        let mut max_counts: Vec<HashMap<&[T], usize>> = vec![HashMap::new(); max_n];
        let mut lengths: Vec<usize> = references.iter().map(|r| r.as_ref().len()).collect();
        for r in references {
            for (k, table) in max_counts.iter_mut().enumerate() {
                for (g, c) in ngram_counts(r.as_ref(), k + 1) {
                    let e = table.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
        }
        lengths.sort_unstable();
        lengths.dedup();
        Ok(BleuReference { max_counts, lengths })
    }

    pub fn sentence(&self, cand: &[T], n: usize) -> f64 {
        let counts: Vec<(usize, usize)> = (1..=n)
            .map(|k| {
                let clipped = ngram_counts(cand, k)
                    .into_iter()
                    .map(|(g, c)| c.min(self.max_counts[k - 1].get(g).copied().unwrap_or(0)))
                    .sum();
                (clipped, (cand.len() + 1).saturating_sub(k))
            })
            .collect();
        let r = closest_length(self.lengths.iter().copied(), cand.len());
        sentence_bleu(&counts, cand.len(), r)
    }

    /// Mean BLEU-n over non-empty candidates; `None` if all are empty.
    pub fn corpus_mean<S: AsRef<[T]>>(&self, candidates: &[S], n: usize) -> Result<Option<f64>> {
        if n == 0 || n > self.max_counts.len() {
            return contract(format!("BLEU order {n} outside 1..={}", self.max_counts.len()));
        }
        let scores: Vec<f64> = candidates
            .iter()
            .map(AsRef::as_ref)
            .filter(|c| !c.is_empty())
            .map(|c| self.sentence(c, n))
            .collect();
        Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
    }
}

/// Mean sentence-level BLEU-n of the non-empty candidates.
pub fn bleu_n<T: Hash + Eq, S: AsRef<[T]>, R: AsRef<[T]>>(candidates: &[S], references: &[R], n: usize) -> Result<Option<f64>> {
    BleuReference::new(references, n)?.corpus_mean(candidates, n)
}

/// Each non-empty sample scored against all other non-empty samples.
/// `None` with fewer than two non-empty samples.
pub fn self_bleu_n<T: Hash + Eq, S: AsRef<[T]>>(samples: &[S], n: usize) -> Result<Option<f64>> {
    if n == 0 {
        return contract("BLEU order must be ≥ 1");
    }
    let kept: Vec<&[T]> = samples.iter().map(AsRef::as_ref).filter(|s| !s.is_empty()).collect();
    if kept.len() < 2 {
        return Ok(None);
    }
    let counts: Vec<Vec<HashMap<&[T], usize>>> = kept.iter().map(|s| (1..=n).map(|k| ngram_counts(s, k)).collect()).collect();
    // per gram: (best count, its owner, runner-up count) for leave-one-out maxima
    let mut top: Vec<HashMap<&[T], (usize, usize, usize)>> = vec![HashMap::new(); n];
    for (owner, per_order) in counts.iter().enumerate() {
        for (k, m) in per_order.iter().enumerate() {
            for (&g, &c) in m {
                let e = top[k].entry(g).or_insert((0, usize::MAX, 0));
                if c > e.0 {
                    *e = (c, owner, e.0);
                } else if c > e.2 {
                    e.2 = c;
                }
            }
        }
    }
    let mut total = 0.0;
    for (i, cand) in kept.iter().enumerate() {
        let per_order: Vec<(usize, usize)> = (0..n)
            .map(|k| {
                let clipped = counts[i][k]
                    .iter()
                    .map(|(g, &c)| {
                        let &(best, owner, second) = &top[k][g];
                        c.min(if owner == i { second } else { best })
                    })
                    .sum();
                (clipped, (cand.len() + 1).saturating_sub(k + 1))
            })
            .collect();
        let r = closest_length(kept.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s.len()), cand.len());
        total += sentence_bleu(&per_order, cand.len(), r);
    }
    Ok(Some(total / kept.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseReport {
    pub distinct_1: Option<f64>,
    pub distinct_2: Option<f64>,
    pub empty_fraction: f64,
    pub self_bleu_2: Option<f64>,
    pub flagged: bool,
}

pub const COLLAPSE_EMPTY_FRACTION: f64 = 0.5;
pub const COLLAPSE_SELF_BLEU: f64 = 0.95;

fn distinct<T: Hash + Eq>(samples: &[&[T]], k: usize) -> Option<f64> {
    let mut unique = std::collections::HashSet::new();
    let mut total = 0usize;
    for s in samples {
        if s.len() >= k {
            for w in s.windows(k) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    (total > 0).then(|| unique.len() as f64 / total as f64)
}

pub fn collapse_report<T: Hash + Eq, S: AsRef<[T]>>(samples: &[S]) -> Result<CollapseReport> {
    if samples.is_empty() {
        return contract("collapse_report needs at least one sample");
    }
    let kept: Vec<&[T]> = samples.iter().map(AsRef::as_ref).filter(|s| !s.is_empty()).collect();
    let empty_fraction = 1.0 - kept.len() as f64 / samples.len() as f64;
    let self_bleu_2 = self_bleu_n(samples, 2)?;
    let flagged = empty_fraction > COLLAPSE_EMPTY_FRACTION || self_bleu_2.is_some_and(|s| s > COLLAPSE_SELF_BLEU);
    Ok(CollapseReport {
        distinct_1: distinct(&kept, 1),
        distinct_2: distinct(&kept, 2),
        empty_fraction,
        self_bleu_2,
        flagged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Full metric record for one evaluation point, plus the samples drawn.
pub fn evaluate(
    g: &Generator,
    held_out: &SequenceBatch,
    references: &BleuReference<'_, usize>,
    cfg: &EvalConfig,
    phase: Phase,
    iteration: usize,
) -> Result<(MetricsRecord, SampleOutput)> {
    let nll = nll_gen(g, held_out, cfg.batch_size, cfg.seed)?;
    let sample_seed = cfg.seed ^ ((iteration as u64 + 1) << 20) ^ ((phase == Phase::Adversarial) as u64) << 40;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let samples = g.sample(cfg.n_samples, &mut rng, SampleMode::Multinomial)?;
    let texts: Vec<&[usize]> = (0..samples.len()).map(|i| samples.tokens.content(i)).collect();
    let mut bleu = [None; 4];
    for (k, b) in bleu.iter_mut().enumerate() {
        *b = references.corpus_mean(&texts, k + 2)?;
    }
    let mut self_bleu = [None; 3];
    for (k, b) in self_bleu.iter_mut().enumerate() {
        *b = self_bleu_n(&texts, k + 2)?;
    }
    let report = collapse_report(&texts)?;
    Ok((
        MetricsRecord {
            phase,
            iteration,
            nll_gen: Some(nll),
            nll_div: sample_nll(&samples),
            bleu,
            self_bleu,
            distinct_1: report.distinct_1,
            distinct_2: report.distinct_2,
            empty_fraction: report.empty_fraction,
        },
        samples,
    ))
}
