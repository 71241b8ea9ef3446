//! C interface to `tattn`.
//!
//! Every fallible function returns a [`TattnStatus`]; on failure the message
//! is available from [`tattn_last_error`] on the same thread. Strings handed
//! out by the library must be released with [`tattn_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tattn::checkpoint::Checkpoint;
use tattn::corpus::{tokenize, Vocabulary};
use tattn::decoding::{self, DecodeOptions};
use tattn::seq2seq::{ModelConfig, Seq2SeqParams};
use tattn::{attention, metrics, Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TattnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Config = 6,
    Numeric = 7,
    Internal = 8,
}

impl From<&Error> for TattnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => TattnStatus::Io,
            Error::Parse { .. } => TattnStatus::Parse,
            Error::Checkpoint { .. } => TattnStatus::Checkpoint,
            Error::Config(_) => TattnStatus::Config,
            Error::Numeric { .. } | Error::Diverged(_) => TattnStatus::Numeric,
            Error::Dimension { .. } | Error::OutOfRange { .. } | Error::Unreachable { .. } | Error::Contract(_) => {
                TattnStatus::InvalidArgument
            }
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: TattnStatus, msg: impl Into<String>) -> TattnStatus {
    set_error(msg);
    status
}

fn fail_with(e: Error) -> TattnStatus {
    fail(TattnStatus::from(&e), e.to_string())
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> TattnStatus) -> TattnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TattnStatus::Internal, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, TattnStatus> {
    if p.is_null() {
        return Err(fail(TattnStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TattnStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

fn give_string(s: String, out: *mut *mut c_char) -> TattnStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            TattnStatus::Ok
        }
        Err(_) => fail(TattnStatus::Internal, "output contains a NUL byte"),
    }
}

/// Message of the last failure on this thread, or NULL. Owned by the
/// library and valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn tattn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tattn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// A loaded model with its vocabularies and decoding settings.
pub struct TattnTranslator {
    params: Seq2SeqParams<Tensor<f32>>,
    config: ModelConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    options: DecodeOptions,
}

/// Loads a checkpoint and its vocabulary files.
///
/// # Safety
/// Path arguments must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tattn_translator_open(
    checkpoint: *const c_char,
    src_vocab: *const c_char,
    tgt_vocab: *const c_char,
    out: *mut *mut TattnTranslator,
) -> TattnStatus {
    guard(|| {
        if out.is_null() {
            return fail(TattnStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let paths = (|| Ok((str_arg(checkpoint, "checkpoint")?, str_arg(src_vocab, "src_vocab")?, str_arg(tgt_vocab, "tgt_vocab")?)))();
        let (c, s, t) = match paths {
            Ok(p) => p,
            Err(status) => return status,
        };
        let loaded = (|| -> tattn::Result<TattnTranslator> {
            let ck = Checkpoint::load(Path::new(c))?;
            let src_vocab = Vocabulary::load(Path::new(s))?;
            let tgt_vocab = Vocabulary::load(Path::new(t))?;
            if ck.config.src_vocab != src_vocab.len() || ck.config.tgt_vocab != tgt_vocab.len() {
                return Err(Error::Config(format!(
                    "checkpoint vocabulary sizes {}/{} do not match the vocabulary files {}/{}",
                    ck.config.src_vocab,
                    ck.config.tgt_vocab,
                    src_vocab.len(),
                    tgt_vocab.len()
                )));
            }
            Ok(TattnTranslator {
                params: ck.params,
                config: ck.config,
                src_vocab,
                tgt_vocab,
                options: DecodeOptions::default(),
            })
        })();
        match loaded {
            Ok(tr) => {
                *out = Box::into_raw(Box::new(tr));
                TattnStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Sets beam width, length normalization (0/1) and the maximum output
/// length (0 means twice the source length plus five).
///
/// # Safety
/// `tr` must be a live handle from [`tattn_translator_open`].
#[no_mangle]
pub unsafe extern "C" fn tattn_translator_set_decoding(
    tr: *mut TattnTranslator,
    beam: usize,
    len_norm: i32,
    max_len: usize,
) -> TattnStatus {
    let Some(tr) = tr.as_mut() else {
        return fail(TattnStatus::NullPointer, "translator is null");
    };
    if beam == 0 {
        return fail(TattnStatus::InvalidArgument, "beam must be at least 1");
    }
    tr.options = DecodeOptions {
        beam,
        len_norm: len_norm != 0,
        max_len: (max_len > 0).then_some(max_len),
    };
    TattnStatus::Ok
}

/// Translates one whitespace-tokenized sentence. The result goes to `*out`
/// and must be released with [`tattn_string_free`].
///
/// # Safety
/// `tr` must be a live handle, `src` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tattn_translate(tr: *const TattnTranslator, src: *const c_char, out: *mut *mut c_char) -> TattnStatus {
    guard(|| {
        let Some(tr) = tr.as_ref() else {
            return fail(TattnStatus::NullPointer, "translator is null");
        };
        if out.is_null() {
            return fail(TattnStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let text = match str_arg(src, "src") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let mut ids = tr.src_vocab.encode(&tokenize(text));
        ids.pop();
        if ids.is_empty() {
            return give_string(String::new(), out);
        }
        match decoding::translate(&tr.params, &tr.config, &ids, &tr.options) {
            Ok(h) => give_string(tr.tgt_vocab.decode(h.content()).join(" "), out),
            Err(e) => fail_with(e),
        }
    })
}

/// Releases a translator. NULL is ignored.
///
/// # Safety
/// `tr` must come from [`tattn_translator_open`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tattn_translator_free(tr: *mut TattnTranslator) {
    if !tr.is_null() {
        drop(Box::from_raw(tr));
    }
}

/// Softmax attention weights of `n` scores into `out`.
///
/// # Safety
/// `scores` and `out` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn tattn_attend_global(scores: *const f64, n: usize, out: *mut f64) -> TattnStatus {
    if scores.is_null() || out.is_null() {
        return fail(TattnStatus::NullPointer, "scores or out is null");
    }
    if n == 0 {
        return fail(TattnStatus::InvalidArgument, "n must be at least 1");
    }
    let e = std::slice::from_raw_parts(scores, n);
    std::slice::from_raw_parts_mut(out, n).copy_from_slice(&attention::attend_global(e));
    TattnStatus::Ok
}

/// Temporal attention over a row-major `steps × n` score matrix: row `t` of
/// `out` receives the weights for decoder step `t + 1`. `window` limits the
/// history to the last `window` steps; 0 keeps all of it.
///
/// # Safety
/// `scores` and `out` must point to `steps * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn tattn_attend_temporal(
    scores: *const f64,
    steps: usize,
    n: usize,
    window: usize,
    out: *mut f64,
) -> TattnStatus {
    if scores.is_null() || out.is_null() {
        return fail(TattnStatus::NullPointer, "scores or out is null");
    }
    if n == 0 {
        return fail(TattnStatus::InvalidArgument, "n must be at least 1");
    }
    let Some(total) = steps.checked_mul(n) else {
        return fail(TattnStatus::InvalidArgument, "steps * n overflows");
    };
    let e = std::slice::from_raw_parts(scores, total);
    let dst = std::slice::from_raw_parts_mut(out, total);
    let mut hist = attention::TemporalHistory::new(n, (window > 0).then_some(window));
    for (row, o) in e.chunks_exact(n).zip(dst.chunks_exact_mut(n)) {
        match hist.step(row) {
            Ok(a) => o.copy_from_slice(&a),
            Err(err) => return fail_with(err),
        }
    }
    TattnStatus::Ok
}

fn corpus(text: &str) -> Vec<Vec<String>> {
    text.lines().map(tokenize).collect()
}

/// Corpus BLEU (0–100) of newline-separated hypotheses against references.
///
/// # Safety
/// `hyps` and `refs` must be NUL-terminated strings; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tattn_bleu(hyps: *const c_char, refs: *const c_char, out: *mut f64) -> TattnStatus {
    metric(hyps, refs, out, |h, r| metrics::bleu(h, r, 4).map(|b| b.bleu))
}

/// Corpus TER (percent) of newline-separated hypotheses against references.
///
/// # Safety
/// As for [`tattn_bleu`].
#[no_mangle]
pub unsafe extern "C" fn tattn_ter(hyps: *const c_char, refs: *const c_char, out: *mut f64) -> TattnStatus {
    metric(hyps, refs, out, |h, r| metrics::corpus_ter(h, r))
}

unsafe fn metric(
    hyps: *const c_char,
    refs: *const c_char,
    out: *mut f64,
    f: impl FnOnce(&[Vec<String>], &[Vec<String>]) -> tattn::Result<f64>,
) -> TattnStatus {
    guard(|| {
        if out.is_null() {
            return fail(TattnStatus::NullPointer, "out is null");
        }
        let (h, r) = match (str_arg(hyps, "hyps"), str_arg(refs, "refs")) {
            (Ok(h), Ok(r)) => (h, r),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match f(&corpus(h), &corpus(r)) {
            Ok(v) => {
                *out = v;
                TattnStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}
