//! Greedy and beam-search decoding, and sentence translation.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::data::{detokenize, tokenize, TokenId, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::math::{log_softmax_into, Tensor};
use crate::model::{DecoderState, EncoderOutput, TranslationModel};

pub const DEFAULT_BEAM_WIDTH: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_decode_len: usize,
    /// Length-normalization exponent; 0 ranks by raw log-probability.
    pub length_penalty_alpha: f64,
}

impl DecodeConfig {
    pub fn new(max_decode_len: usize) -> Self {
        DecodeConfig {
            beam_width: DEFAULT_BEAM_WIDTH,
            max_decode_len,
            length_penalty_alpha: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_decode_len == 0 {
            return Err(Error::Contract(
                "beam width and max decode length must be positive".into(),
            ));
        }
        if !self.length_penalty_alpha.is_finite() || self.length_penalty_alpha < 0.0 {
            return Err(Error::Contract("length penalty must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Next-token logits, successor state and optional attention weights.
pub type Step<S> = (Vec<f64>, S, Option<Vec<f64>>);

/// Anything that yields next-token logits from a recurrent state.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    /// Logits for the token after `prev`, the successor state, and the
    /// attention weights of this step if there are any.
    fn step(&self, prev: TokenId, state: &Self::State) -> Result<Step<Self::State>>;
}

/// A translation model bound to one encoded source sentence.
pub struct EncodedSource<'a> {
    pub model: &'a TranslationModel,
    pub enc: EncoderOutput,
}

impl<'a> EncodedSource<'a> {
    pub fn new(model: &'a TranslationModel, source_ids: &[TokenId]) -> Result<Self> {
        Ok(EncodedSource {
            model,
            enc: model.encode(source_ids)?,
        })
    }
}

impl StepScorer for EncodedSource<'_> {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.model.config.tgt_vocab_size
    }

    fn initial_state(&self) -> DecoderState {
        self.model.initial_decoder_state(&self.enc)
    }

    fn step(&self, prev: TokenId, state: &DecoderState) -> Result<Step<DecoderState>> {
        let out = self.model.decode_step(prev, state, &self.enc)?;
        Ok((out.logits.into_data(), out.state, Some(out.weights.0.into_data())))
    }
}

/// A partial or complete output sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis<S> {
    /// Generated ids after BOS; a finished hypothesis ends in EOS unless it
    /// hit the length limit.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub state: S,
    /// Attention weights of each generated token.
    pub attention: Vec<Vec<f64>>,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// `log_prob / len^alpha`.
    pub fn score(&self, alpha: f64) -> f64 {
        length_normalized(self.log_prob, self.tokens.len(), alpha)
    }
}

fn length_normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(alpha)
    }
}

/// Higher score first, then shorter, then lexicographically smaller.
fn rank(a_score: f64, a: &[TokenId], b_score: f64, b: &[TokenId]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then(a.len().cmp(&b.len()))
        .then_with(|| a.cmp(b))
}

/// Argmax decoding; ties go to the lowest id.
pub fn greedy_decode<M: StepScorer>(model: &M, max_len: usize) -> Result<Hypothesis<M::State>> {
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state(),
        attention: Vec::new(),
        finished: false,
    };
    let mut log_probs = vec![0.0; model.vocab_size()];
    let mut prev = BOS;
    while !hyp.finished {
        let (logits, state, weights) = model.step(prev, &hyp.state)?;
        log_softmax_into(&logits, &mut log_probs);
        let mut best = 0;
        for (v, &lp) in log_probs.iter().enumerate() {
            if hyp.log_prob + lp > hyp.log_prob + log_probs[best] {
                best = v;
            }
        }
        hyp.log_prob += log_probs[best];
        hyp.tokens.push(best);
        hyp.state = state;
        hyp.attention.extend(weights);
        hyp.finished = best == EOS || hyp.tokens.len() >= max_len;
        prev = best;
    }
    Ok(hyp)
}

/// Beam search over the full vocabulary.
///
/// Each round expands every active hypothesis by every token and keeps the
/// best `beam_width` expansions. Those ending in EOS or reaching the length
/// limit are set aside as finished. The search stops once `beam_width`
/// hypotheses have finished or none remain active. Returns the finished
/// hypotheses, best first.
pub fn beam_search<M: StepScorer>(model: &M, config: &DecodeConfig) -> Result<Vec<Hypothesis<M::State>>> {
    config.validate()?;
    let k = config.beam_width;
    let alpha = config.length_penalty_alpha;
    let v = model.vocab_size();
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state(),
        attention: Vec::new(),
        finished: false,
    }];
    let mut finished: Vec<Hypothesis<M::State>> = Vec::new();
    let mut log_probs = vec![0.0; v];

    while !active.is_empty() && finished.len() < k {
        struct Expansion {
            parent: usize,
            token: TokenId,
            log_prob: f64,
            score: f64,
        }
        let mut expansions = Vec::with_capacity(active.len() * v);
        let mut stepped = Vec::with_capacity(active.len());
        for (parent, hyp) in active.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let (logits, state, weights) = model.step(prev, &hyp.state)?;
            log_softmax_into(&logits, &mut log_probs);
            for (token, &lp) in log_probs.iter().enumerate() {
                let log_prob = hyp.log_prob + lp;
                let score = length_normalized(log_prob, hyp.tokens.len() + 1, alpha);
                expansions.push(Expansion {
                    parent,
                    token,
                    log_prob,
                    score,
                });
            }
            stepped.push((state, weights));
        }
        // All expansions of one round have the same length, so the
        // lexicographic tie-break compares the parent prefix, then the token.
        expansions.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| active[a.parent].tokens.cmp(&active[b.parent].tokens))
                .then(a.token.cmp(&b.token))
        });
        expansions.truncate(k);

        let mut next = Vec::with_capacity(k);
        for e in expansions {
            let parent = &active[e.parent];
            let (state, weights) = &stepped[e.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(e.token);
            let mut attention = parent.attention.clone();
            attention.extend(weights.clone());
            let done = e.token == EOS || tokens.len() >= config.max_decode_len;
            let hyp = Hypothesis {
                tokens,
                log_prob: e.log_prob,
                state: state.clone(),
                attention,
                finished: done,
            };
            if done {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        active = next;
    }
    finished.sort_by(|a, b| rank(a.score(alpha), &a.tokens, b.score(alpha), &b.tokens));
    finished.truncate(k);
    Ok(finished)
}

/// Result of translating one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    /// Space-joined output without EOS.
    pub text: String,
    pub source_tokens: Vec<String>,
    /// Output tokens including EOS when it was produced.
    pub tokens: Vec<String>,
    pub score: f64,
    /// `[output tokens × source tokens]`, one row per entry of `tokens`.
    pub attention: Tensor,
}

impl Translation {
    /// `token<TAB>w1,w2,...` per output token, weights to 6 decimals.
    pub fn attention_dump(&self) -> String {
        let mut s = String::new();
        for (r, tok) in self.tokens.iter().enumerate() {
            let row: Vec<String> = self.attention.row(r).iter().map(|w| format!("{w:.6}")).collect();
            let _ = writeln!(s, "{tok}\t{}", row.join(","));
        }
        s
    }
}

/// Best beam hypothesis for already-tokenized source ids.
pub fn decode_ids(
    model: &TranslationModel,
    source_ids: &[TokenId],
    config: &DecodeConfig,
) -> Result<Hypothesis<DecoderState>> {
    let scorer = EncodedSource::new(model, source_ids)?;
    beam_search(&scorer, config)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}

/// Tokenizes, encodes (unknown words become UNK), beam-searches and
/// detokenizes one sentence.
pub fn translate(
    text: &str,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    model: &TranslationModel,
    config: &DecodeConfig,
) -> Result<Translation> {
    let source_tokens = tokenize(text);
    if source_tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let ids = src_vocab.encode(&source_tokens);
    let best = decode_ids(model, &ids, config)?;
    let tokens = tgt_vocab.decode(&best.tokens)?;
    let words = match best.tokens.last() {
        Some(&EOS) => &tokens[..tokens.len() - 1],
        _ => &tokens[..],
    };
    let rows = best.tokens.len();
    let attention = Tensor::new(&[rows, ids.len()], best.attention.concat())?;
    Ok(Translation {
        text: detokenize(words),
        source_tokens,
        score: best.score(config.length_penalty_alpha),
        tokens,
        attention,
    })
}

/// Applies `f` to every item on up to `threads` scoped workers, keeping the
/// input order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("decode worker panicked"))
            .collect()
    })
}
