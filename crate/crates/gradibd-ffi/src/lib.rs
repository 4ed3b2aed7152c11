//! C ABI surface for gradibd.
//!
//! Handles are opaque pointers owned by Rust: every `*_load`/`*_from_*`
//! constructor has a matching `*_free`, and nothing else may release them.
//! Fallible calls return a [`GradibdStatus`]; on failure the per-thread
//! message from [`gradibd_last_error`] describes what went wrong. The
//! header shipped in `include/gradibd.h` is generated from this file by
//! cbindgen at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gradibd::bucket::bucketize;
use gradibd::checkpoint::{self, Checkpoint};
use gradibd::cohort::{load_cohort, CohortRecord, MAX_LOOKBACK_DAYS};
use gradibd::graph::IcdGraph;
use gradibd::train::{score_graphs, vocab_from_records};
use gradibd::CodeVocab;

/// Outcome of a fallible call. Anything other than `Ok` leaves a
/// description in `gradibd_last_error` for the calling thread.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GradibdStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Model = 5,
    OutOfRange = 6,
    Panic = 7,
}

/// A loaded patient cohort.
pub struct GradibdCohort {
    records: Vec<CohortRecord>,
}

/// A diagnosis-code vocabulary.
pub struct GradibdVocab {
    vocab: CodeVocab,
}

/// A trained model restored from a checkpoint file.
pub struct GradibdModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: String) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: GradibdStatus, message: String) -> GradibdStatus {
    set_last_error(message);
    status
}

/// Runs `body` with panics converted to `GradibdStatus::Panic` so unwinding
/// never crosses the C boundary.
fn guarded(body: impl FnOnce() -> GradibdStatus) -> GradibdStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(GradibdStatus::Panic, "internal panic".into()),
    }
}

/// # Safety
/// `path` must be a valid NUL-terminated string.
unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, GradibdStatus> {
    if path.is_null() {
        return Err(fail(GradibdStatus::NullArgument, "path is null".into()));
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(e) => Err(fail(
            GradibdStatus::InvalidUtf8,
            format!("path is not valid UTF-8: {e}"),
        )),
    }
}

unsafe fn deref<'a, T>(handle: *const T, name: &str) -> Result<&'a T, GradibdStatus> {
    if handle.is_null() {
        return Err(fail(GradibdStatus::NullArgument, format!("{name} is null")));
    }
    Ok(&*handle)
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gradibd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the message left by the most recent failing call on this thread,
/// or an empty string when no call has failed. The pointer stays valid until
/// the next failing gradibd call on the same thread.
#[no_mangle]
pub extern "C" fn gradibd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a cohort from a JSON-lines file and stores the new handle in
/// `out`. The handle must be released with `gradibd_cohort_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gradibd_cohort_load(
    path: *const c_char,
    out: *mut *mut GradibdCohort,
) -> GradibdStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GradibdStatus::NullArgument, "out is null".into());
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_cohort(path) {
            Ok(records) => {
                *out = Box::into_raw(Box::new(GradibdCohort { records }));
                GradibdStatus::Ok
            }
            Err(e) => fail(GradibdStatus::Parse, format!("cohort load failed: {e}")),
        }
    })
}

/// Returns the number of patients in the cohort, or 0 for a null handle.
///
/// # Safety
/// `cohort` must be null or a live handle from `gradibd_cohort_load`.
#[no_mangle]
pub unsafe extern "C" fn gradibd_cohort_len(cohort: *const GradibdCohort) -> usize {
    guarded_query(|| Ok(deref(cohort, "cohort")?.records.len()), 0)
}

/// Writes patient `index`'s label (0 or 1) to `out`.
///
/// # Safety
/// `cohort` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gradibd_cohort_label(
    cohort: *const GradibdCohort,
    index: usize,
    out: *mut u8,
) -> GradibdStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GradibdStatus::NullArgument, "out is null".into());
        }
        let cohort = match deref(cohort, "cohort") {
            Ok(c) => c,
            Err(status) => return status,
        };
        match cohort.records.get(index) {
            Some(record) => {
                *out = record.label;
                GradibdStatus::Ok
            }
            None => fail(
                GradibdStatus::OutOfRange,
                format!("index {index} out of range for {} patients", cohort.records.len()),
            ),
        }
    })
}

/// Returns patient `index`'s id as a newly allocated string, or null on
/// failure. Release the result with `gradibd_string_free`.
///
/// # Safety
/// `cohort` must be a live handle from `gradibd_cohort_load`.
#[no_mangle]
pub unsafe extern "C" fn gradibd_cohort_patient_id(
    cohort: *const GradibdCohort,
    index: usize,
) -> *mut c_char {
    let result = catch_unwind(AssertUnwindSafe(|| {
        let cohort = match deref(cohort, "cohort") {
            Ok(c) => c,
            Err(_) => return ptr::null_mut(),
        };
        match cohort.records.get(index) {
            Some(record) => CString::new(record.patient_id.replace('\0', " "))
                .map_or(ptr::null_mut(), CString::into_raw),
            None => {
                fail(
                    GradibdStatus::OutOfRange,
                    format!("index {index} out of range for {} patients", cohort.records.len()),
                );
                ptr::null_mut()
            }
        }
    }));
    match result {
        Ok(p) => p,
        Err(_) => {
            fail(GradibdStatus::Panic, "internal panic".into());
            ptr::null_mut()
        }
    }
}

/// Releases a cohort handle. Passing null is a no-op.
///
/// # Safety
/// `cohort` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gradibd_cohort_free(cohort: *mut GradibdCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// Loads a vocabulary from a plain-text file (one code per line) and stores
/// the new handle in `out`. Release with `gradibd_vocab_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gradibd_vocab_load(
    path: *const c_char,
    out: *mut *mut GradibdVocab,
) -> GradibdStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GradibdStatus::NullArgument, "out is null".into());
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match CodeVocab::load(path) {
            Ok(vocab) => {
                *out = Box::into_raw(Box::new(GradibdVocab { vocab }));
                GradibdStatus::Ok
            }
            Err(e) => fail(GradibdStatus::Io, format!("vocab load failed: {e}")),
        }
    })
}

/// Builds a vocabulary from every code observed in the cohort and stores the
/// new handle in `out`. Release with `gradibd_vocab_free`.
///
/// # Safety
/// `cohort` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gradibd_vocab_from_cohort(
    cohort: *const GradibdCohort,
    out: *mut *mut GradibdVocab,
) -> GradibdStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GradibdStatus::NullArgument, "out is null".into());
        }
        let cohort = match deref(cohort, "cohort") {
            Ok(c) => c,
            Err(status) => return status,
        };
        match vocab_from_records(&cohort.records) {
            Ok(vocab) => {
                *out = Box::into_raw(Box::new(GradibdVocab { vocab }));
                GradibdStatus::Ok
            }
            Err(e) => fail(GradibdStatus::Parse, format!("vocab build failed: {e}")),
        }
    })
}

/// Returns the number of codes in the vocabulary (unknown slot included),
/// or 0 for a null handle.
///
/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gradibd_vocab_len(vocab: *const GradibdVocab) -> usize {
    guarded_query(|| Ok(deref(vocab, "vocab")?.vocab.n()), 0)
}

/// Releases a vocabulary handle. Passing null is a no-op.
///
/// # Safety
/// `vocab` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gradibd_vocab_free(vocab: *mut GradibdVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Loads a trained model from a checkpoint file and stores the new handle
/// in `out`. Release with `gradibd_model_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gradibd_model_load(
    path: *const c_char,
    out: *mut *mut GradibdModel,
) -> GradibdStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GradibdStatus::NullArgument, "out is null".into());
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match checkpoint::load(path) {
            Ok(checkpoint) => {
                *out = Box::into_raw(Box::new(GradibdModel { checkpoint }));
                GradibdStatus::Ok
            }
            Err(e) => fail(GradibdStatus::Model, format!("checkpoint load failed: {e}")),
        }
    })
}

/// Returns the number of trainable parameters in the model, or 0 for a
/// null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gradibd_model_n_params(model: *const GradibdModel) -> usize {
    guarded_query(
        || Ok(deref(model, "model")?.checkpoint.params.flatten().len()),
        0,
    )
}

/// Scores patient `index`: encodes the trajectory with the model's stored
/// bucket width, runs the forward pass, and writes the risk probability in
/// (0, 1) to `out`. The vocabulary must be the one the model was trained
/// with (same size).
///
/// # Safety
/// All handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gradibd_model_score(
    model: *const GradibdModel,
    vocab: *const GradibdVocab,
    cohort: *const GradibdCohort,
    index: usize,
    out: *mut f64,
) -> GradibdStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GradibdStatus::NullArgument, "out is null".into());
        }
        let model = match deref(model, "model") {
            Ok(m) => m,
            Err(status) => return status,
        };
        let vocab = match deref(vocab, "vocab") {
            Ok(v) => v,
            Err(status) => return status,
        };
        let cohort = match deref(cohort, "cohort") {
            Ok(c) => c,
            Err(status) => return status,
        };
        let record = match cohort.records.get(index) {
            Some(r) => r,
            None => {
                return fail(
                    GradibdStatus::OutOfRange,
                    format!("index {index} out of range for {} patients", cohort.records.len()),
                )
            }
        };
        match score_record(model, &vocab.vocab, record) {
            Ok(score) => {
                *out = score;
                GradibdStatus::Ok
            }
            Err((status, message)) => fail(status, message),
        }
    })
}

/// Scores every patient in the cohort into `out`, which must hold exactly
/// `len == gradibd_cohort_len(cohort)` doubles.
///
/// # Safety
/// All handles must be live and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gradibd_model_score_all(
    model: *const GradibdModel,
    vocab: *const GradibdVocab,
    cohort: *const GradibdCohort,
    out: *mut f64,
    len: usize,
) -> GradibdStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GradibdStatus::NullArgument, "out is null".into());
        }
        let model = match deref(model, "model") {
            Ok(m) => m,
            Err(status) => return status,
        };
        let vocab = match deref(vocab, "vocab") {
            Ok(v) => v,
            Err(status) => return status,
        };
        let cohort = match deref(cohort, "cohort") {
            Ok(c) => c,
            Err(status) => return status,
        };
        if len != cohort.records.len() {
            return fail(
                GradibdStatus::OutOfRange,
                format!("buffer holds {len} scores but the cohort has {}", cohort.records.len()),
            );
        }
        for (i, record) in cohort.records.iter().enumerate() {
            match score_record(model, &vocab.vocab, record) {
                Ok(score) => *out.add(i) = score,
                Err((status, message)) => return fail(status, message),
            }
        }
        GradibdStatus::Ok
    })
}

/// Releases a model handle. Passing null is a no-op.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gradibd_model_free(model: *mut GradibdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Releases a string returned by `gradibd_cohort_patient_id`. Passing null
/// is a no-op.
///
/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gradibd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn score_record(
    model: &GradibdModel,
    vocab: &CodeVocab,
    record: &CohortRecord,
) -> Result<f64, (GradibdStatus, String)> {
    let checkpoint = &model.checkpoint;
    if vocab.n() != checkpoint.params.n_codes {
        return Err((
            GradibdStatus::Model,
            format!(
                "vocabulary has {} codes but the model was trained with {}",
                vocab.n(),
                checkpoint.params.n_codes
            ),
        ));
    }
    let matrix = bucketize(record, vocab, checkpoint.config.tau, MAX_LOOKBACK_DAYS)
        .map_err(|e| (GradibdStatus::Parse, format!("encoding failed: {e}")))?;
    let graph = IcdGraph::build(&matrix);
    let scores = score_graphs(&checkpoint.params, &[graph], &checkpoint.config.model)
        .map_err(|e| (GradibdStatus::Model, format!("scoring failed: {e}")))?;
    Ok(scores[0])
}

fn guarded_query<T>(body: impl FnOnce() -> Result<T, GradibdStatus>, fallback: T) -> T {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(value)) => value,
        Ok(Err(_)) => fallback,
        Err(_) => {
            fail(GradibdStatus::Panic, "internal panic".into());
            fallback
        }
    }
}
