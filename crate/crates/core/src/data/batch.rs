use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ParallelPair, TokenId, Vocabulary, BOS, EOS, PAD};

/// A sentence pair as token ids. The target carries no BOS/EOS; batching
/// adds them.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EncodedPair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl EncodedPair {
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        EncodedPair { source, target }
    }

    pub fn from_pair(pair: &ParallelPair, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Self {
        EncodedPair {
            source: src_vocab.encode(&pair.source),
            target: tgt_vocab.encode(&pair.target),
        }
    }
}

/// Padded id matrices for a group of pairs.
///
/// Target rows are `BOS w1 .. wn EOS PAD..`; `target_lengths` counts BOS
/// and EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub source_lengths: Vec<usize>,
    pub target_lengths: Vec<usize>,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl Batch {
    pub fn from_pairs<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = &'a EncodedPair>,
    {
        let pairs: Vec<&EncodedPair> = pairs.into_iter().collect();
        assert!(!pairs.is_empty(), "a batch needs at least one pair");
        let max_src_len = pairs.iter().map(|p| p.source.len()).max().unwrap();
        let max_tgt_len = pairs.iter().map(|p| p.target.len() + 2).max().unwrap();
        let mut source_ids = vec![PAD; pairs.len() * max_src_len];
        let mut target_ids = vec![PAD; pairs.len() * max_tgt_len];
        for (r, p) in pairs.iter().enumerate() {
            source_ids[r * max_src_len..][..p.source.len()].copy_from_slice(&p.source);
            let row = &mut target_ids[r * max_tgt_len..][..p.target.len() + 2];
            row[0] = BOS;
            row[1..=p.target.len()].copy_from_slice(&p.target);
            row[p.target.len() + 1] = EOS;
        }
        Batch {
            source_ids,
            target_ids,
            source_lengths: pairs.iter().map(|p| p.source.len()).collect(),
            target_lengths: pairs.iter().map(|p| p.target.len() + 2).collect(),
            max_src_len,
            max_tgt_len,
        }
    }

    pub fn len(&self) -> usize {
        self.source_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_lengths.is_empty()
    }

    pub fn source_row(&self, r: usize) -> &[TokenId] {
        &self.source_ids[r * self.max_src_len..(r + 1) * self.max_src_len]
    }

    pub fn target_row(&self, r: usize) -> &[TokenId] {
        &self.target_ids[r * self.max_tgt_len..(r + 1) * self.max_tgt_len]
    }

    /// Number of predicted target tokens (everything after BOS, EOS included).
    pub fn predicted_tokens(&self) -> usize {
        self.target_lengths.iter().map(|l| l - 1).sum()
    }
}

/// Batches per length-sorted bucket.
const BUCKET_BATCHES: usize = 8;

/// Groups corpus indices into batches for one epoch.
///
/// The corpus is shuffled under `seed`, cut into buckets of
/// `BUCKET_BATCHES * batch_size` pairs, each bucket sorted by source length
/// and split into batches, and the batch order shuffled again.
pub fn batch_indices(source_lengths: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..source_lengths.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for bucket in order.chunks_mut(batch_size * BUCKET_BATCHES) {
        bucket.sort_by_key(|&i| source_lengths[i]);
        batches.extend(bucket.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// One epoch of batches over `corpus`.
pub fn batch_iter(corpus: &[EncodedPair], batch_size: usize, seed: u64) -> impl Iterator<Item = Batch> + '_ {
    let lengths: Vec<usize> = corpus.iter().map(|p| p.source.len()).collect();
    batch_indices(&lengths, batch_size, seed)
        .into_iter()
        .map(move |idx| Batch::from_pairs(idx.iter().map(|&i| &corpus[i])))
}
