//! C ABI for the lcmatch engine: opaque handles, integer status codes, and a
//! per-thread error message. The header is generated into `include/` by the
//! build script.
//!
//! Conventions:
//! - Functions return [`LcmStatus`]; `LCM_STATUS_OK` (0) means success.
//! - On failure, `lcm_last_error_message()` returns a UTF-8 description
//!   valid until the next failing call on the same thread.
//! - Output buffers are caller-allocated; sizes are element counts.
//! - Handles are freed exactly once with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use lcmatch::config::RunConfig;
use lcmatch::encoders::{checkpoint, encode_image, normalize, EncoderConfig, ModelParams};
use lcmatch::error::Error;
use lcmatch::longcap::{encode_long_text, LongTextConfig};
use lcmatch::textpipe::{load_vocabulary_file, tokenize, window_count, Vocabulary};

/// Result of a C API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcmStatus {
    Ok = 0,
    /// A pointer was null or an argument value was out of range.
    InvalidArgument = 1,
    /// The filesystem said no.
    IoError = 2,
    /// A file existed but could not be decoded.
    ParseError = 3,
    /// Tensor or buffer shapes disagree.
    ShapeError = 4,
    /// Anything else that went wrong while computing.
    RuntimeError = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> LcmStatus {
    match err {
        Error::Io { .. } => LcmStatus::IoError,
        Error::Parse { .. } | Error::Format(_) | Error::Truncated(_) => LcmStatus::ParseError,
        Error::Shape(_) => LcmStatus::ShapeError,
        Error::Config { .. }
        | Error::InvalidContext { .. }
        | Error::InvalidStride { .. }
        | Error::InvalidKernel { .. }
        | Error::InvalidK { .. } => LcmStatus::InvalidArgument,
        _ => LcmStatus::RuntimeError,
    }
}

fn fail(err: &Error) -> LcmStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn invalid(message: &str) -> LcmStatus {
    set_error(message);
    LcmStatus::InvalidArgument
}

/// Message describing the most recent failure on this thread. Never null;
/// empty when nothing failed yet. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn lcm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, LcmStatus> {
    if ptr.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not valid UTF-8")))
}

// ------------------------------------------------------------------- vocab

/// Opaque vocabulary handle.
pub struct LcmVocab {
    inner: Vocabulary,
}

/// Loads a vocabulary file (UTF-8, one token per line).
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must point to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn lcm_vocab_load(path: *const c_char, out: *mut *mut LcmVocab) -> LcmStatus {
    if out.is_null() {
        return invalid("out handle pointer is null");
    }
    let path = match cstr_arg(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match load_vocabulary_file(Path::new(path)) {
        Ok(vocab) => {
            *out = Box::into_raw(Box::new(LcmVocab { inner: vocab }));
            LcmStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Frees a vocabulary handle. Null is a no-op.
///
/// # Safety
/// `vocab` must have come from `lcm_vocab_load` and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn lcm_vocab_free(vocab: *mut LcmVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Number of tokens, including the three specials. Returns 0 for null.
///
/// # Safety
/// `vocab` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lcm_vocab_size(vocab: *const LcmVocab) -> u64 {
    if vocab.is_null() {
        return 0;
    }
    (*vocab).inner.len() as u64
}

/// Tokenizes `text`. Writes at most `capacity` ids to `out_ids` and always
/// stores the full token count in `out_len`; call with `out_ids` null (and
/// capacity 0) to query the required size. Fails with ShapeError when a
/// non-null buffer is too small.
///
/// # Safety
/// Pointers must be valid for their stated capacities; `text` must be
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lcm_tokenize(
    vocab: *const LcmVocab,
    text: *const c_char,
    out_ids: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> LcmStatus {
    if vocab.is_null() {
        return invalid("vocab handle is null");
    }
    if out_len.is_null() {
        return invalid("out_len is null");
    }
    let text = match cstr_arg(text, "text") {
        Ok(t) => t,
        Err(status) => return status,
    };
    let seq = tokenize(text, &(*vocab).inner);
    *out_len = seq.ids.len();
    if out_ids.is_null() {
        return LcmStatus::Ok;
    }
    if capacity < seq.ids.len() {
        set_error(&format!("buffer holds {capacity} ids, need {}", seq.ids.len()));
        return LcmStatus::ShapeError;
    }
    std::ptr::copy_nonoverlapping(seq.ids.as_ptr(), out_ids, seq.ids.len());
    LcmStatus::Ok
}

/// Number of sliding windows for a token sequence of `sequence_length`
/// content tokens, with the given per-window content capacity and stride.
///
/// # Safety
/// `out` must point to writable storage for one u64.
#[no_mangle]
pub unsafe extern "C" fn lcm_window_count(
    sequence_length: u64,
    content_capacity: u64,
    stride: u64,
    out: *mut u64,
) -> LcmStatus {
    if out.is_null() {
        return invalid("out is null");
    }
    match window_count(sequence_length as usize, content_capacity as usize, stride as usize) {
        Ok(count) => {
            *out = count as u64;
            LcmStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

// ------------------------------------------------------------------- model

/// Opaque model handle: vocabulary, encoder configuration, windowing
/// settings, and trained parameters.
pub struct LcmModel {
    vocab: Vocabulary,
    cfg: EncoderConfig,
    ltc: LongTextConfig,
    params: ModelParams,
    image_size: usize,
}

/// Loads a model from a run-config file and a checkpoint. The config supplies
/// the vocabulary path and encoder shapes; the checkpoint must match them.
///
/// # Safety
/// Both paths must be valid NUL-terminated strings; `out` must point to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn lcm_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut LcmModel,
) -> LcmStatus {
    if out.is_null() {
        return invalid("out handle pointer is null");
    }
    let config_path = match cstr_arg(config_path, "config_path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    let checkpoint_path = match cstr_arg(checkpoint_path, "checkpoint_path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    let result = (|| -> Result<LcmModel, Error> {
        let run = RunConfig::load(Path::new(config_path))?;
        let vocab = load_vocabulary_file(&run.vocab_path)?;
        let cfg = run.encoder_config(vocab.len());
        cfg.validate()?;
        let params = checkpoint::load(Path::new(checkpoint_path), &cfg)?;
        Ok(LcmModel {
            vocab,
            ltc: run.long_text_config(),
            image_size: run.image_size,
            cfg,
            params,
        })
    })();
    match result {
        Ok(model) => {
            *out = Box::into_raw(Box::new(model));
            LcmStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Frees a model handle. Null is a no-op.
///
/// # Safety
/// `model` must have come from `lcm_model_load` and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn lcm_model_free(model: *mut LcmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Dimension of the shared embedding space. Returns 0 for null.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lcm_model_embed_dim(model: *const LcmModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    (*model).cfg.embed_dim as u64
}

/// Encodes a caption of any length through the sliding-window path into a
/// unit-norm embedding of `lcm_model_embed_dim` values.
///
/// # Safety
/// `out` must be valid for `capacity` doubles; `text` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lcm_encode_text(
    model: *const LcmModel,
    text: *const c_char,
    out: *mut f64,
    capacity: usize,
) -> LcmStatus {
    if model.is_null() {
        return invalid("model handle is null");
    }
    if out.is_null() {
        return invalid("out buffer is null");
    }
    let model = &*model;
    if capacity < model.cfg.embed_dim {
        set_error(&format!("buffer holds {capacity} values, need {}", model.cfg.embed_dim));
        return LcmStatus::ShapeError;
    }
    let text = match cstr_arg(text, "text") {
        Ok(t) => t,
        Err(status) => return status,
    };
    let seq = tokenize(text, &model.vocab);
    match encode_long_text(&seq, &model.vocab, &model.params, &model.cfg, &model.ltc) {
        Ok(embedding) => {
            std::ptr::copy_nonoverlapping(embedding.values().as_ptr(), out, model.cfg.embed_dim);
            LcmStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Encodes an image file (P6 PPM or LCI tensor, resized as needed) into a
/// unit-norm embedding of `lcm_model_embed_dim` values.
///
/// # Safety
/// `out` must be valid for `capacity` doubles; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lcm_encode_image_file(
    model: *const LcmModel,
    path: *const c_char,
    out: *mut f64,
    capacity: usize,
) -> LcmStatus {
    if model.is_null() {
        return invalid("model handle is null");
    }
    if out.is_null() {
        return invalid("out buffer is null");
    }
    let model = &*model;
    if capacity < model.cfg.embed_dim {
        set_error(&format!("buffer holds {capacity} values, need {}", model.cfg.embed_dim));
        return LcmStatus::ShapeError;
    }
    let path = match cstr_arg(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    let result = lcmatch::data::image_io::load_image(Path::new(path), model.image_size)
        .and_then(|image| encode_image(&image, &model.params, &model.cfg))
        .and_then(|raw| normalize(&raw));
    match result {
        Ok(embedding) => {
            std::ptr::copy_nonoverlapping(embedding.values().as_ptr(), out, model.cfg.embed_dim);
            LcmStatus::Ok
        }
        Err(e) => fail(&e),
    }
}
