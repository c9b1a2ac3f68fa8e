//! C interface to the attn-nmt toolkit.
//!
//! Every function returns an [`AnmtStatus`]. On failure a message is kept
//! per thread and can be read with [`anmt_last_error`]. Strings handed out
//! by the library are freed with [`anmt_string_free`]; translators with
//! [`anmt_translator_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use attn_nmt::checkpoint::Checkpoint;
use attn_nmt::data::{tokenize, Vocabulary};
use attn_nmt::decode::{translate, DecodeConfig};
use attn_nmt::metrics::{bleu, corpus_ter, BLEU_MAX_N};
use attn_nmt::model::TranslationModel;
use attn_nmt::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnmtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    /// Malformed or inconsistent input data.
    Data = 4,
    /// Unreadable, corrupt or mismatched checkpoint.
    Checkpoint = 5,
    /// The sentence had no tokens.
    EmptyInput = 6,
    /// An internal panic was caught at the boundary.
    Panic = 7,
}

/// A loaded model with its vocabularies and decoding settings.
pub struct AnmtTranslator {
    model: TranslationModel,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    decode: DecodeConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(AnmtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } | Error::Stream(_) => AnmtStatus::Io,
            Error::Corruption(_) | Error::Version { .. } | Error::Schema(_) => AnmtStatus::Checkpoint,
            Error::EmptyInput => AnmtStatus::EmptyInput,
            _ => AnmtStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `body`, recording any failure or panic as the thread's last error.
fn guard<F: FnOnce() -> Result<(), Failure>>(body: F) -> AnmtStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => AnmtStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            AnmtStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(AnmtStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(AnmtStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

fn null_out(name: &str) -> Failure {
    Failure(AnmtStatus::NullArgument, format!("{name} is null"))
}

/// Loads a checkpoint and the vocabularies it was trained with.
///
/// `beam_width` 0 selects the default width. On success `*out` owns a new
/// translator.
///
/// # Safety
/// The path arguments are NUL-terminated strings and `out` points to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn anmt_translator_load(
    model_path: *const c_char,
    src_vocab_path: *const c_char,
    tgt_vocab_path: *const c_char,
    beam_width: usize,
    out: *mut *mut AnmtTranslator,
) -> AnmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        *out = ptr::null_mut();
        let model_path = str_arg(model_path, "model_path")?;
        let src_vocab_path = str_arg(src_vocab_path, "src_vocab_path")?;
        let tgt_vocab_path = str_arg(tgt_vocab_path, "tgt_vocab_path")?;
        let ck = Checkpoint::load(Path::new(model_path))?;
        let src_vocab = Vocabulary::load(Path::new(src_vocab_path))?;
        let tgt_vocab = Vocabulary::load(Path::new(tgt_vocab_path))?;
        ck.check_vocabularies(&src_vocab, &tgt_vocab)?;
        let mut decode = DecodeConfig::new(ck.model.config.max_decode_len);
        if beam_width > 0 {
            decode.beam_width = beam_width;
        }
        decode.validate()?;
        *out = Box::into_raw(Box::new(AnmtTranslator {
            model: ck.model,
            src_vocab,
            tgt_vocab,
            decode,
        }));
        Ok(())
    })
}

/// Frees a translator. Null is ignored.
///
/// # Safety
/// `translator` is null or was returned by [`anmt_translator_load`] and not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn anmt_translator_free(translator: *mut AnmtTranslator) {
    if !translator.is_null() {
        drop(Box::from_raw(translator));
    }
}

/// Translates one sentence. On success `*out` owns the translation, to be
/// released with [`anmt_string_free`].
///
/// # Safety
/// `translator` is a live translator, `text` a NUL-terminated string and
/// `out` points to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn anmt_translate(
    translator: *const AnmtTranslator,
    text: *const c_char,
    out: *mut *mut c_char,
) -> AnmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        *out = ptr::null_mut();
        let t = translator.as_ref().ok_or_else(|| null_out("translator"))?;
        let text = str_arg(text, "text")?;
        let result = translate(text, &t.src_vocab, &t.tgt_vocab, &t.model, &t.decode)?;
        let c = CString::new(result.text).map_err(|_| Failure(AnmtStatus::Data, "translation contains NUL".into()))?;
        *out = c.into_raw();
        Ok(())
    })
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or was returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn anmt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

type Corpus = Vec<Vec<String>>;

/// Splits newline-separated sentences into tokens.
fn corpus_tokens(text: &str) -> Corpus {
    text.lines().map(tokenize).collect()
}

/// # Safety
/// Both arguments are NUL-terminated strings.
unsafe fn paired_corpora(candidates: *const c_char, references: *const c_char) -> Result<(Corpus, Corpus), Failure> {
    let cands = corpus_tokens(str_arg(candidates, "candidates")?);
    let refs = corpus_tokens(str_arg(references, "references")?);
    if cands.len() != refs.len() {
        return Err(Error::Alignment {
            source_lines: cands.len(),
            target_lines: refs.len(),
        }
        .into());
    }
    Ok((cands, refs))
}

/// Corpus BLEU in [0, 1] of newline-separated candidate sentences against
/// the same number of reference sentences.
///
/// # Safety
/// `candidates` and `references` are NUL-terminated strings and `out` points
/// to a writable double.
#[no_mangle]
pub unsafe extern "C" fn anmt_bleu(candidates: *const c_char, references: *const c_char, out: *mut f64) -> AnmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        let (cands, refs) = paired_corpora(candidates, references)?;
        *out = bleu(&cands, &refs, BLEU_MAX_N)?.bleu;
        Ok(())
    })
}

/// Corpus TER: total word edits over total reference words.
///
/// # Safety
/// As for [`anmt_bleu`].
#[no_mangle]
pub unsafe extern "C" fn anmt_ter(candidates: *const c_char, references: *const c_char, out: *mut f64) -> AnmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        let (cands, refs) = paired_corpora(candidates, references)?;
        *out = corpus_ter(&cands, &refs)?.score();
        Ok(())
    })
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn anmt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}
