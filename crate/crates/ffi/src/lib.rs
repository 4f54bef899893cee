//! C interface to the style-transfer library.
//!
//! Every fallible function returns an [`LsStatus`]; on failure a message is
//! available from [`ls_last_error_message`] on the same thread. Strings
//! returned through out-parameters are owned by the caller and released with
//! [`ls_string_free`]. Model handles are released with [`ls_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use longstyle::corpus::{load_styles, StyleSet, StyledDoc, TokenizerConfig, Vocab};
use longstyle::evalkit::{bleu_n, overall_metrics};
use longstyle::generator::Model;
use longstyle::runner::load_checkpoint;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Runtime = 4,
    Panic = 5,
}

/// Opaque model handle.
pub struct LsModel {
    model: Model,
    vocab: Vocab,
    styles: StyleSet,
    tokenizer: TokenizerConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn guard(f: impl FnOnce() -> Result<(), (LsStatus, String)>) -> LsStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LsStatus::Ok,
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            LsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (LsStatus, String)> {
    if p.is_null() {
        return Err((LsStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (LsStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

fn runtime<E: std::fmt::Display>(e: E) -> (LsStatus, String) {
    (LsStatus::Runtime, e.to_string())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ls_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint and the corpus vocabulary (`vocab.json`, `styles.json`
/// in `corpus_dir`).
///
/// # Safety
/// Both paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_model_load(checkpoint: *const c_char, corpus_dir: *const c_char, out: *mut *mut LsModel) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err((LsStatus::NullPointer, "out is null".into()));
        }
        *out = ptr::null_mut();
        let ck = str_arg(checkpoint, "checkpoint")?;
        let dir = Path::new(str_arg(corpus_dir, "corpus_dir")?);
        let (model, cfg) = load_checkpoint(Path::new(ck)).map_err(|e| (LsStatus::Io, e.to_string()))?;
        let vocab = Vocab::load(&dir.join("vocab.json")).map_err(|e| (LsStatus::Io, e.to_string()))?;
        let styles = load_styles(&dir.join("styles.json")).map_err(|e| (LsStatus::Io, e.to_string()))?;
        if vocab.len() != model.config.vocab_size || styles.len() != model.config.num_styles {
            return Err((LsStatus::InvalidArgument, "corpus vocabulary or style set does not match the checkpoint".into()));
        }
        let h = Box::new(LsModel { model, vocab, styles, tokenizer: cfg.tokenizer_config() });
        *out = Box::into_raw(h);
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`ls_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ls_model_free(model: *mut LsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of styles known to the model.
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn ls_model_num_styles(model: *const LsModel) -> usize {
    model.as_ref().map_or(0, |m| m.styles.len())
}

/// Transfers `text` written in `source_style` to `target_style`. The result
/// is written to `out` and must be released with [`ls_string_free`].
///
/// # Safety
/// `model` must be a live handle; strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_model_transfer(
    model: *const LsModel,
    text: *const c_char,
    source_style: *const c_char,
    target_style: *const c_char,
    out: *mut *mut c_char,
) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err((LsStatus::NullPointer, "out is null".into()));
        }
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or((LsStatus::NullPointer, "model is null".to_string()))?;
        let text = str_arg(text, "text")?;
        let style = |p, name| -> Result<usize, (LsStatus, String)> {
            let s = str_arg(p, name)?;
            m.styles.id(s).ok_or((LsStatus::InvalidArgument, format!("unknown style `{s}`")))
        };
        let (src, tgt) = (style(source_style, "source_style")?, style(target_style, "target_style")?);
        let (tokens, sentence_ends) = m.tokenizer.tokenize(text, &m.vocab);
        if tokens.is_empty() {
            return Err((LsStatus::InvalidArgument, "text has no tokens".into()));
        }
        let doc = StyledDoc { doc_id: String::new(), tokens, sentence_ends, style: src };
        let ids = m.model.transfer(&doc, tgt).map_err(runtime)?;
        let s = CString::new(m.tokenizer.detokenize(&ids, &m.vocab)).map_err(runtime)?;
        *out = s.into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ls_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// `G-BL = sqrt(acc * (bleu1 + bleu2) / 2)` and `G-BS = sqrt(acc * bs_f1)`.
///
/// # Safety
/// Output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_overall_metrics(
    acc: f64,
    bleu1: f64,
    bleu2: f64,
    bs_f1: f64,
    out_g_bl: *mut f64,
    out_g_bs: *mut f64,
) -> LsStatus {
    guard(|| {
        if out_g_bl.is_null() || out_g_bs.is_null() {
            return Err((LsStatus::NullPointer, "output pointer is null".into()));
        }
        let (bl, bs) = overall_metrics(acc, bleu1, bleu2, bs_f1).map_err(|e| (LsStatus::InvalidArgument, e.to_string()))?;
        *out_g_bl = bl;
        *out_g_bs = bs;
        Ok(())
    })
}

/// Corpus BLEU-n over `count` token-id sequence pairs.
///
/// # Safety
/// `cands[i]` must point to `cand_lens[i]` ids and `refs[i]` to `ref_lens[i]`
/// ids for every `i < count`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_bleu(
    cands: *const *const u32,
    cand_lens: *const usize,
    refs: *const *const u32,
    ref_lens: *const usize,
    count: usize,
    n: usize,
    out: *mut f64,
) -> LsStatus {
    guard(|| {
        if out.is_null() || (count > 0 && (cands.is_null() || cand_lens.is_null() || refs.is_null() || ref_lens.is_null())) {
            return Err((LsStatus::NullPointer, "null argument".into()));
        }
        let read = |ptrs: *const *const u32, lens: *const usize| -> Result<Vec<Vec<u32>>, (LsStatus, String)> {
            (0..count)
                .map(|i| {
                    let (p, l) = (*ptrs.add(i), *lens.add(i));
                    if l == 0 {
                        Ok(Vec::new())
                    } else if p.is_null() {
                        Err((LsStatus::NullPointer, format!("sequence {i} is null")))
                    } else {
                        Ok(std::slice::from_raw_parts(p, l).to_vec())
                    }
                })
                .collect()
        };
        let (c, r) = (read(cands, cand_lens)?, read(refs, ref_lens)?);
        *out = bleu_n(&c, &r, n).map_err(|e| (LsStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}
