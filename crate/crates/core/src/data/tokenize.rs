use unicode_general_category::get_general_category;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// True for characters in any Unicode punctuation category (`P*`).
pub fn is_punctuation(c: char) -> bool {
    get_general_category(c).abbreviation().starts_with('P')
}

/// Word-level tokenizer shared by both languages.
///
/// Text is NFC-normalized and lowercased, split on Unicode whitespace, and
/// punctuation marks at either end of a word become tokens of their own.
/// Punctuation inside a word ("don't", "e.g") stays attached. Scripts without
/// case, such as Gujarati, pass through the lowercasing unchanged.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect::<String>().to_lowercase();
    let mut tokens = Vec::new();
    for word in normalized.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let start = chars.iter().position(|&c| !is_punctuation(c));
        let Some(start) = start else {
            tokens.extend(chars.iter().map(|c| c.to_string()));
            continue;
        };
        let end = chars.iter().rposition(|&c| !is_punctuation(c)).unwrap() + 1;
        tokens.extend(chars[..start].iter().map(|c| c.to_string()));
        tokens.push(chars[start..end].iter().collect());
        tokens.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    tokens
}

/// [`tokenize`] over raw bytes, rejecting invalid UTF-8.
pub fn tokenize_bytes(bytes: &[u8]) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Encoding {
        offset: e.valid_up_to(),
        line: None,
    })?;
    Ok(tokenize(text))
}

/// Joins tokens with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}
