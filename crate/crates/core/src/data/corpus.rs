use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::tokenize;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<ParallelPair>,
    /// Line pairs skipped because either side tokenized to nothing.
    pub dropped: usize,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Reads a UTF-8 text file as lines, without terminators. A trailing newline
/// does not start an extra line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    split_lines(&bytes)
}

pub(crate) fn split_lines(bytes: &[u8]) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let offset = e.valid_up_to();
        let line = bytes[..offset].iter().filter(|&&b| b == b'\n').count() + 1;
        Error::Encoding {
            offset,
            line: Some(line),
        }
    })?;
    Ok(text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect())
}

/// Pairs line `i` of the source with line `i` of the target, tokenizing both.
pub fn pair_lines<S: AsRef<str>>(source: &[S], target: &[S]) -> Result<ParallelCorpus> {
    if source.len() != target.len() {
        return Err(Error::Alignment {
            source_lines: source.len(),
            target_lines: target.len(),
        });
    }
    let mut corpus = ParallelCorpus::default();
    for (s, t) in source.iter().zip(target) {
        let source = tokenize(s.as_ref());
        let target = tokenize(t.as_ref());
        if source.is_empty() || target.is_empty() {
            corpus.dropped += 1;
        } else {
            corpus.pairs.push(ParallelPair { source, target });
        }
    }
    Ok(corpus)
}

pub fn load_parallel_corpus(source_path: &Path, target_path: &Path) -> Result<ParallelCorpus> {
    let source = read_lines(source_path)?;
    let target = read_lines(target_path)?;
    pair_lines(&source, &target)
}

/// Shuffles `items` under `seed` and splits off the last `val_fraction` of
/// them (rounded down) as the validation part. Returns `(train, validation)`.
pub fn split_train_validation<T: Clone>(items: &[T], val_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    assert!(
        (0.0..1.0).contains(&val_fraction),
        "validation fraction must be in [0, 1)"
    );
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (items.len() as f64 * val_fraction).floor() as usize;
    let cut = items.len() - n_val;
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    (pick(&order[..cut]), pick(&order[cut..]))
}
