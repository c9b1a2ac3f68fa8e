use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const VOCAB_MAGIC: &str = "attn-nmt-vocab v1";
pub const DEFAULT_MAX_SIZE: usize = 15_000;

/// Bijective token/id map. Ids 0..4 are always PAD, BOS, EOS, UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized sentences.
    ///
    /// Tokens occurring at least `min_freq` times are ranked by descending
    /// frequency, ties broken lexicographically, and the list is cut so the
    /// vocabulary (specials included) has at most `max_size` entries.
    pub fn build<I>(corpus: I, max_size: usize, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: AsRef<[String]>,
    {
        if max_size < NUM_SPECIALS + 1 {
            return Err(Error::Contract(format!("max_size must be at least 5, got {max_size}")));
        }
        if min_freq < 1 {
            return Err(Error::Contract("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let corpus: Vec<I::Item> = corpus.into_iter().collect();
        for sentence in &corpus {
            for tok in sentence.as_ref() {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, n)| n >= min_freq && !SPECIAL_TOKENS.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_SPECIALS);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Vocabulary whose non-special ids are assigned to `tokens` in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, TokenId> =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for tok in tokens {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Contract(format!("invalid vocabulary token {tok:?}")));
            }
            if token_to_id.insert(tok.clone(), id_to_token.len()).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary token {tok:?}")));
            }
            id_to_token.push(tok);
        }
        Ok(Vocabulary {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Maps tokens to ids, unknown tokens to [`UNK`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id).map(str::to_string).ok_or(Error::Index {
                    what: "token id",
                    index: id,
                    size: self.len(),
                })
            })
            .collect()
    }

    /// The on-disk text form: a header line, then one token per line
    /// starting at id 4.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{VOCAB_MAGIC} size={}", self.len()).unwrap();
        for tok in &self.id_to_token[NUM_SPECIALS..] {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Contract("vocabulary file is empty".into()))?;
        let size: usize = header
            .strip_prefix(VOCAB_MAGIC)
            .and_then(|rest| rest.strip_prefix(" size="))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Contract(format!("bad vocabulary header {header:?}")))?;
        let vocab = Self::from_tokens(lines.map(str::to_string))?;
        if vocab.len() != size {
            return Err(Error::Contract(format!(
                "vocabulary header declares {size} entries but file holds {}",
                vocab.len()
            )));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Encoding {
            offset: e.valid_up_to(),
            line: None,
        })?;
        Self::parse(text)
    }

    /// SHA-256 of the serialized file form.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_file_string().as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sent(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    #[test]
    fn frequency_order_and_threshold() {
        let corpus = vec![sent("a b a"), sent("a")];
        let v = Vocabulary::build(&corpus, 10, 1).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.len(), 6);
        let v = Vocabulary::build(&corpus, 10, 2).unwrap();
        assert_eq!(v.id("b"), None);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
    }

    #[test]
    fn ties_break_lexicographically_and_truncate() {
        let corpus = vec![sent("x m x m q")];
        let v = Vocabulary::build(&corpus, 6, 1).unwrap();
        assert_eq!(v.id("m"), Some(4));
        assert_eq!(v.id("x"), Some(5));
        assert_eq!(v.id("q"), None);
        assert!(Vocabulary::build(&corpus, 4, 1).is_err());
    }

    #[test]
    fn special_names_in_corpus_are_not_duplicated() {
        let v = Vocabulary::build(&[sent("<unk> a")], 10, 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("<unk>"), Some(UNK));
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::from_tokens(["a".to_string()]).unwrap();
        assert_eq!(v.encode(&["a"]), vec![4]);
        assert_eq!(v.encode(&["zzz"]), vec![UNK]);
        assert_eq!(v.decode(&[UNK, 4]).unwrap(), ["<unk>", "a"]);
        assert!(matches!(v.decode(&[5]), Err(Error::Index { .. })));
    }

    #[test]
    fn file_round_trip_is_byte_stable() {
        let corpus = vec![sent("the cat sat"), sent("the dog")];
        let a = Vocabulary::build(&corpus, 100, 1).unwrap();
        let b = Vocabulary::build(corpus.iter().rev(), 100, 1).unwrap();
        assert_eq!(a.to_file_string(), b.to_file_string());
        assert!(a.to_file_string().starts_with("attn-nmt-vocab v1 size=8\nthe\n"));
        assert_eq!(Vocabulary::parse(&a.to_file_string()).unwrap(), a);
    }

    #[test]
    fn parse_rejects_bad_files() {
        assert!(Vocabulary::parse("").is_err());
        assert!(Vocabulary::parse("something else\na\n").is_err());
        assert!(Vocabulary::parse("attn-nmt-vocab v1 size=6\na\n").is_err());
        assert!(Vocabulary::parse("attn-nmt-vocab v1 size=6\na\na\n").is_err());
    }

    proptest! {
        #[test]
        fn decode_encode_is_identity_in_vocab(
            words in proptest::collection::btree_set("[a-z]{1,6}", 1..20),
            picks in proptest::collection::vec(any::<prop::sample::Index>(), 0..30),
        ) {
            let words: Vec<String> = words.into_iter().collect();
            let v = Vocabulary::from_tokens(words.clone()).unwrap();
            let seq: Vec<String> = picks.iter().map(|i| words[i.index(words.len())].clone()).collect();
            prop_assert_eq!(v.decode(&v.encode(&seq)).unwrap(), seq);
        }
    }
}
