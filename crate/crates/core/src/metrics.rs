//! Corpus BLEU, word-level TER and teacher-forced perplexity.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use crate::data::{Batch, EncodedPair, ParallelPair, Vocabulary, EOS};
use crate::decode::{decode_ids, parallel_map, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{LossStats, TranslationModel};

/// Number of n-gram orders in the standard BLEU.
pub const BLEU_MAX_N: usize = 4;

/// Minimum number of insertions, deletions and substitutions turning
/// `candidate` into `reference`.
pub fn edit_distance<T: PartialEq>(candidate: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, c) in candidate.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(c != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Sentence TER: edits divided by reference length. No shift operation.
pub fn ter<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("TER needs a non-empty reference".into()));
    }
    Ok(edit_distance(candidate, reference) as f64 / reference.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerStats {
    /// Edit count of each sentence.
    pub edits: Vec<usize>,
    pub reference_words: usize,
}

impl TerStats {
    pub fn total_edits(&self) -> usize {
        self.edits.iter().sum()
    }

    /// Total edits over total reference words.
    pub fn score(&self) -> f64 {
        self.total_edits() as f64 / self.reference_words as f64
    }
}

pub fn corpus_ter<C, R, T>(candidates: &[C], references: &[R]) -> Result<TerStats>
where
    C: AsRef<[T]>,
    R: AsRef<[T]>,
    T: PartialEq,
{
    check_parallel(candidates.len(), references.len())?;
    let mut edits = Vec::with_capacity(candidates.len());
    let mut reference_words = 0;
    for (c, r) in candidates.iter().zip(references) {
        let r = r.as_ref();
        if r.is_empty() {
            return Err(Error::Contract(format!("reference {} is empty", edits.len())));
        }
        edits.push(edit_distance(c.as_ref(), r));
        reference_words += r.len();
    }
    Ok(TerStats { edits, reference_words })
}

fn check_parallel(candidates: usize, references: usize) -> Result<()> {
    if candidates != references {
        return Err(Error::Contract(format!(
            "{candidates} candidates but {references} references"
        )));
    }
    if candidates == 0 {
        return Err(Error::Contract("no sentences to score".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// In `[0, 1]`.
    pub bleu: f64,
    /// Modified precision `p_n` for `n = 1..=max_n`.
    pub precisions: Vec<f64>,
    /// Clipped matches per order.
    pub matches: Vec<usize>,
    /// Candidate n-grams per order.
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with clipped n-gram counts, uniform weights, the
/// standard brevity penalty, a single reference and no smoothing.
///
/// An order with no candidate n-grams at all has precision 1. A zero
/// precision makes the score 0.
pub fn bleu<C, R, T>(candidates: &[C], references: &[R], max_n: usize) -> Result<BleuReport>
where
    C: AsRef<[T]>,
    R: AsRef<[T]>,
    T: Hash + Eq,
{
    check_parallel(candidates.len(), references.len())?;
    if max_n == 0 {
        return Err(Error::Contract("BLEU needs max_n >= 1".into()));
    }
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, reference) in candidates.iter().zip(references) {
        let (cand, reference) = (cand.as_ref(), reference.as_ref());
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=max_n {
            let refs = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matches[n - 1] += count.min(refs.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 1.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let bleu = if precisions.contains(&0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_len: c_len,
        reference_len: r_len,
    })
}

/// Summed teacher-forced negative log-likelihood over `pairs`, scored in
/// batches of `batch_size` in corpus order.
pub fn corpus_nll(model: &TranslationModel, pairs: &[EncodedPair], batch_size: usize) -> Result<LossStats> {
    let mut stats = LossStats { total: 0.0, tokens: 0 };
    for chunk in pairs.chunks(batch_size.max(1)) {
        let s = model.forward_loss(&Batch::from_pairs(chunk))?;
        stats.total += s.total;
        stats.tokens += s.tokens;
    }
    Ok(stats)
}

/// `exp(total NLL / tokens)`; EOS counts as a predicted token.
pub fn perplexity_from(stats: &LossStats) -> Result<f64> {
    if stats.tokens == 0 {
        return Err(Error::Contract("perplexity over zero tokens".into()));
    }
    Ok(stats.mean().exp())
}

pub fn perplexity(model: &TranslationModel, pairs: &[EncodedPair]) -> Result<f64> {
    perplexity_from(&corpus_nll(model, pairs, 32)?)
}

/// Everything the `evaluate` command reports.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu: BleuReport,
    pub ter: TerStats,
    pub perplexity: f64,
    pub perplexity_tokens: usize,
}

impl MetricReport {
    /// `key=value` lines in a fixed order.
    pub fn to_report_string(&self) -> String {
        let mut s = String::new();
        let b = &self.bleu;
        let _ = writeln!(s, "bleu={:.6}", b.bleu);
        let _ = writeln!(s, "bleu_x100={:.2}", b.bleu * 100.0);
        for (n, p) in b.precisions.iter().enumerate() {
            let _ = writeln!(s, "p{}={p:.6}", n + 1);
        }
        let _ = writeln!(s, "bp={:.6}", b.brevity_penalty);
        let _ = writeln!(s, "ter={:.6}", self.ter.score());
        let _ = writeln!(s, "ppl={:.6}", self.perplexity);
        let _ = writeln!(s, "sentences={}", self.ter.edits.len());
        let _ = writeln!(s, "candidate_tokens={}", b.candidate_len);
        let _ = writeln!(s, "reference_tokens={}", b.reference_len);
        let _ = writeln!(s, "edits={}", self.ter.total_edits());
        let _ = writeln!(s, "ppl_tokens={}", self.perplexity_tokens);
        s
    }
}

/// Beam-decodes every source sentence and scores the outputs against the
/// references with corpus BLEU and TER; perplexity is teacher-forced on the
/// same pairs. Decoding runs on up to `threads` workers.
pub fn evaluate(
    model: &TranslationModel,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    pairs: &[ParallelPair],
    config: &DecodeConfig,
    threads: usize,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluation corpus is empty".into()));
    }
    config.validate()?;
    let encoded: Vec<EncodedPair> = pairs
        .iter()
        .map(|p| EncodedPair::from_pair(p, src_vocab, tgt_vocab))
        .collect();
    let outputs = parallel_map(&encoded, threads, |p| -> Result<Vec<String>> {
        let best = decode_ids(model, &p.source, config)?;
        let ids = match best.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &best.tokens[..],
        };
        tgt_vocab.decode(ids)
    });
    let candidates = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let references: Vec<&[String]> = pairs.iter().map(|p| p.target.as_slice()).collect();
    let nll = corpus_nll(model, &encoded, 32)?;
    Ok(MetricReport {
        bleu: bleu(&candidates, &references, BLEU_MAX_N)?,
        ter: corpus_ter(&candidates, &references)?,
        perplexity: perplexity_from(&nll)?,
        perplexity_tokens: nll.tokens,
    })
}
