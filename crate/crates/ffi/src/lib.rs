//! C ABI over the evaluation library: opaque handles, integer status codes,
//! UTF-8 strings.
//!
//! Conventions, uniform across every function:
//! - Null pointers are rejected with `NL_STATUS_NULL_ARGUMENT`; nothing is
//!   dereferenced first, and no call panics across the boundary.
//! - Output strings are allocated by this library and must be released with
//!   `nl_string_free`; handles with their matching `*_free` function.
//! - A non-`OK` status leaves a human-readable message retrievable through
//!   `nl_last_error_message`, valid on the calling thread until the next
//!   failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use normlens::ingest::{load_norms, DatasetDescriptor, DatasetFormat};
use normlens::judge::{parse_judge_output, Expected};
use normlens::promptgen::{generate_prompts, MatrixConfig, PromptTemplateSet};
use normlens::report::{aggregate, emit_table, joined_rows, without_controls, OutputFormat,
    TableLayout};
use normlens::store::RunStore;
use normlens::taxonomy::Norm;
use normlens::util::context_key;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The filesystem refused a read or write.
    Io = 3,
    /// Input could not be decoded (malformed JSONL, bad labels, bad store).
    Parse = 4,
    /// Inputs were well-formed but unusable (empty dataset, missing run).
    Invalid = 5,
    /// Judge text carried no readable answer.
    Unparseable = 6,
    /// A defect inside the library; details in the error message.
    Internal = 7,
}

/// Which answer shape `nl_judge_parse` should extract.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlExpectedShape {
    /// A list of norm ids.
    NormList = 0,
    /// A True/False verdict plus the ids backing it.
    BooleanPlusList = 1,
}

/// An owned list of norms behind an opaque pointer.
pub struct NlNorms {
    norms: Vec<Norm>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: NlStatus, message: &str) -> NlStatus {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
    status
}

fn guarded<F: FnOnce() -> NlStatus>(body: F) -> NlStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unexpected panic".to_string());
            fail(NlStatus::Internal, &message)
        }
    }
}

/// # Safety
/// `ptr` must be null or a readable NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, NlStatus> {
    if ptr.is_null() {
        return Err(NlStatus::NullArgument);
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| NlStatus::InvalidUtf8)
}

fn give_string(text: String, out: *mut *mut c_char) -> NlStatus {
    let cstring = match CString::new(text) {
        Ok(s) => s,
        Err(_) => return fail(NlStatus::Internal, "output contained a NUL byte"),
    };
    unsafe { *out = cstring.into_raw() };
    NlStatus::Ok
}

/// Library version as a static string; never freed by the caller.
#[no_mangle]
pub extern "C" fn nl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message from the most recent failing call on this thread; empty before
/// any failure. Owned by the library, valid until the next failing call.
#[no_mangle]
pub extern "C" fn nl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads norms from a canonical JSONL file into a new handle. Rows that fail
/// validation are skipped, matching the batch loader; an entirely invalid
/// file is an error.
#[no_mangle]
pub unsafe extern "C" fn nl_norms_load_jsonl(
    path: *const c_char,
    out: *mut *mut NlNorms,
) -> NlStatus {
    guarded(|| {
        if out.is_null() {
            return fail(NlStatus::NullArgument, "out pointer is null");
        }
        let path = match read_str(path) {
            Ok(p) => PathBuf::from(p),
            Err(status) => return fail(status, "path argument unreadable"),
        };
        let descriptor = DatasetDescriptor::new(path, DatasetFormat::CanonicalJsonLines);
        match load_norms(&descriptor) {
            Ok(outcome) => {
                *out = Box::into_raw(Box::new(NlNorms {
                    norms: outcome.norms,
                }));
                NlStatus::Ok
            }
            Err(e) => {
                let status = match &e {
                    normlens::error::IngestError::Unreadable { .. } => NlStatus::Io,
                    normlens::error::IngestError::ZeroValidRecords { .. } => NlStatus::Invalid,
                    _ => NlStatus::Parse,
                };
                fail(status, &e.to_string())
            }
        }
    })
}

/// Number of norms in the handle; zero for null.
#[no_mangle]
pub unsafe extern "C" fn nl_norms_len(norms: *const NlNorms) -> usize {
    if norms.is_null() {
        return 0;
    }
    (*norms).norms.len()
}

/// Copies the norms whose cultural context matches `country`
/// (case-insensitively) into a fresh handle. An empty result is valid.
#[no_mangle]
pub unsafe extern "C" fn nl_norms_filter_country(
    norms: *const NlNorms,
    country: *const c_char,
    out: *mut *mut NlNorms,
) -> NlStatus {
    guarded(|| {
        if norms.is_null() || out.is_null() {
            return fail(NlStatus::NullArgument, "norms and out must be non-null");
        }
        let country = match read_str(country) {
            Ok(c) => c,
            Err(status) => return fail(status, "country argument unreadable"),
        };
        let wanted = context_key(country);
        let filtered: Vec<Norm> = (*norms)
            .norms
            .iter()
            .filter(|n| context_key(&n.cultural_context) == wanted)
            .cloned()
            .collect();
        *out = Box::into_raw(Box::new(NlNorms { norms: filtered }));
        NlStatus::Ok
    })
}

/// Serializes the handle's norms to canonical JSONL, one record per line.
#[no_mangle]
pub unsafe extern "C" fn nl_norms_to_jsonl(
    norms: *const NlNorms,
    out: *mut *mut c_char,
) -> NlStatus {
    guarded(|| {
        if norms.is_null() || out.is_null() {
            return fail(NlStatus::NullArgument, "norms and out must be non-null");
        }
        let mut body = String::new();
        for norm in &(*norms).norms {
            match serde_json::to_string(norm) {
                Ok(line) => {
                    body.push_str(&line);
                    body.push('\n');
                }
                Err(e) => return fail(NlStatus::Internal, &e.to_string()),
            }
        }
        give_string(body, out)
    })
}

/// Releases a norms handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nl_norms_free(norms: *mut NlNorms) {
    if !norms.is_null() {
        drop(Box::from_raw(norms));
    }
}

/// Expands every norm in the handle into its full prompt matrix using the
/// built-in templates, returning the prompts as JSONL.
#[no_mangle]
pub unsafe extern "C" fn nl_prompts_generate_jsonl(
    norms: *const NlNorms,
    out: *mut *mut c_char,
) -> NlStatus {
    guarded(|| {
        if norms.is_null() || out.is_null() {
            return fail(NlStatus::NullArgument, "norms and out must be non-null");
        }
        let templates = PromptTemplateSet::builtin();
        let matrix = MatrixConfig::default();
        let mut body = String::new();
        for norm in &(*norms).norms {
            let prompts = match generate_prompts(norm, &templates, &matrix) {
                Ok(p) => p,
                Err(e) => return fail(NlStatus::Parse, &e.to_string()),
            };
            for prompt in prompts {
                match serde_json::to_string(&prompt) {
                    Ok(line) => {
                        body.push_str(&line);
                        body.push('\n');
                    }
                    Err(e) => return fail(NlStatus::Internal, &e.to_string()),
                }
            }
        }
        give_string(body, out)
    })
}

/// Parses raw judge output against the expected shape. `valid_ids_json` is a
/// JSON array of id strings; the result is a JSON object with `verdict`,
/// `ids`, `unmatched`, and `flags` fields. Text carrying no readable answer
/// yields `NL_STATUS_UNPARSEABLE`.
#[no_mangle]
pub unsafe extern "C" fn nl_judge_parse(
    raw: *const c_char,
    expected: NlExpectedShape,
    valid_ids_json: *const c_char,
    out: *mut *mut c_char,
) -> NlStatus {
    guarded(|| {
        if out.is_null() {
            return fail(NlStatus::NullArgument, "out pointer is null");
        }
        let raw = match read_str(raw) {
            Ok(r) => r,
            Err(status) => return fail(status, "raw argument unreadable"),
        };
        let ids_text = match read_str(valid_ids_json) {
            Ok(v) => v,
            Err(status) => return fail(status, "valid_ids_json argument unreadable"),
        };
        let valid_ids: Vec<String> = match serde_json::from_str(ids_text) {
            Ok(ids) => ids,
            Err(e) => {
                return fail(
                    NlStatus::Parse,
                    &format!("valid_ids_json is not a JSON string array: {e}"),
                )
            }
        };
        let shape = match expected {
            NlExpectedShape::NormList => Expected::NormList,
            NlExpectedShape::BooleanPlusList => Expected::BooleanPlusList,
        };
        match parse_judge_output(raw, shape, &valid_ids) {
            Ok(parsed) => {
                let body = serde_json::json!({
                    "verdict": parsed.verdict,
                    "ids": parsed.ids,
                    "unmatched": parsed.unmatched,
                    "flags": parsed.flags,
                });
                give_string(body.to_string(), out)
            }
            Err(e) => fail(NlStatus::Unparseable, &e.to_string()),
        }
    })
}

/// Renders the model-by-context violation-rate table for a finished run
/// directory as CSV. Control (norm-irrelevant) verdicts are excluded, as in
/// the headline report artifacts.
#[no_mangle]
pub unsafe extern "C" fn nl_report_table2(
    run_dir: *const c_char,
    out: *mut *mut c_char,
) -> NlStatus {
    guarded(|| {
        if out.is_null() {
            return fail(NlStatus::NullArgument, "out pointer is null");
        }
        let run_dir = match read_str(run_dir) {
            Ok(p) => PathBuf::from(p),
            Err(status) => return fail(status, "run_dir argument unreadable"),
        };
        let store = match RunStore::open(Path::new(&run_dir)) {
            Ok(s) => s,
            Err(e) => {
                let status = match &e {
                    normlens::error::StoreError::MissingRun { .. } => NlStatus::Invalid,
                    normlens::error::StoreError::Io { .. } => NlStatus::Io,
                    _ => NlStatus::Parse,
                };
                return fail(status, &e.to_string());
            }
        };
        let rows = match joined_rows(&store) {
            Ok(rows) => rows,
            Err(e) => return fail(NlStatus::Parse, &e.to_string()),
        };
        let headline = without_controls(&rows);
        let cells = aggregate(&headline, TableLayout::Table2Layout.group_by());
        match emit_table(&cells, TableLayout::Table2Layout, OutputFormat::DelimitedTable) {
            Ok(csv) => give_string(csv, out),
            Err(e) => fail(NlStatus::Invalid, &e.to_string()),
        }
    })
}
