//! C ABI over the keyarg scoring, consolidation and agreement functions.
//!
//! Every fallible call returns a [`KeyargStatus`]; on failure the message is
//! kept per thread and read back with [`keyarg_last_error`]. Results go
//! through out-pointers. Panics never cross the boundary.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use keyarg::consolidation::{Label, MultiPathScheduler, PairId, PairRecord};
use keyarg::evaluation::{holm, icc3k, pabak};
use keyarg::model::TopicVector;
use keyarg::sampling::overlap_ratio;
use keyarg::similarity::{cosine_similarity, topic_distance_similarity};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyargStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Conflict = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyargLabel {
    Unlabeled = 0,
    Similar = 1,
    Dissimilar = 2,
}

impl From<Label> for KeyargLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::Unlabeled => KeyargLabel::Unlabeled,
            Label::Similar => KeyargLabel::Similar,
            Label::Dissimilar => KeyargLabel::Dissimilar,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KeyargStats {
    pub total_pairs: usize,
    pub human_queries: usize,
    pub propagated: usize,
    pub delta: f64,
    pub tau: f64,
}

/// Opaque consolidation state. Pairs are addressed by their input index.
pub struct KeyargScheduler {
    inner: MultiPathScheduler,
    pairs: Vec<PairId>,
    index: HashMap<PairId, usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(KeyargStatus, String);

impl Fail {
    fn invalid(msg: impl ToString) -> Self {
        Fail(KeyargStatus::InvalidArgument, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KeyargStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KeyargStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            KeyargStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(KeyargStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    non_null(p, what)?;
    CStr::from_ptr(p).to_str().map_err(|_| Fail::invalid(format!("{what} is not UTF-8")))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    non_null(out, what)?;
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn keyarg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn keyarg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `u` and `v` must each point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn keyarg_cosine_similarity(
    u: *const f64,
    v: *const f64,
    len: usize,
    out: *mut f64,
) -> KeyargStatus {
    guard(|| {
        let (u, v) = (slice(u, len, "u")?, slice(v, len, "v")?);
        let s = cosine_similarity(u, v).map_err(Fail::invalid)?;
        write(out, s, "out")
    })
}

/// Topic similarity 1 / (1 + d) of two topic count vectors.
///
/// # Safety
/// `a` and `b` must each point to `len` readable counts; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn keyarg_topic_similarity(
    a: *const u32,
    b: *const u32,
    len: usize,
    out: *mut f64,
) -> KeyargStatus {
    guard(|| {
        let a = TopicVector::new(slice(a, len, "a")?.to_vec());
        let b = TopicVector::new(slice(b, len, "b")?.to_vec());
        let s = topic_distance_similarity(&a, &b).map_err(Fail::invalid)?;
        write(out, s, "out")
    })
}

/// # Safety
/// Both strings must be NUL-terminated UTF-8; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn keyarg_overlap_ratio(
    opinion: *const c_char,
    argument: *const c_char,
    out: *mut f64,
) -> KeyargStatus {
    guard(|| {
        let r = overlap_ratio(text(opinion, "opinion")?, text(argument, "argument")?).map_err(Fail::invalid)?;
        write(out, r, "out")
    })
}

/// PABAK over an `items` x `raters` row-major matrix of 0/1 votes.
///
/// # Safety
/// `votes` must point to `items * raters` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn keyarg_pabak(votes: *const u8, items: usize, raters: usize, out: *mut f64) -> KeyargStatus {
    guard(|| {
        let n = items.checked_mul(raters).ok_or_else(|| Fail::invalid("matrix too large"))?;
        let flat = slice(votes, n, "votes")?;
        let rows: Vec<Vec<bool>> = flat.chunks(raters.max(1)).map(|r| r.iter().map(|&x| x != 0).collect()).collect();
        write(out, pabak(&rows).map_err(Fail::invalid)?, "out")
    })
}

/// ICC(3,k) over an `items` x `raters` row-major matrix.
///
/// # Safety
/// `matrix` must point to `items * raters` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn keyarg_icc3k(matrix: *const f64, items: usize, raters: usize, out: *mut f64) -> KeyargStatus {
    guard(|| {
        let n = items.checked_mul(raters).ok_or_else(|| Fail::invalid("matrix too large"))?;
        let flat = slice(matrix, n, "matrix")?;
        let rows: Vec<Vec<f64>> = flat.chunks(raters.max(1)).map(<[f64]>::to_vec).collect();
        write(out, icc3k(&rows).map_err(Fail::invalid)?, "out")
    })
}

/// Holm-adjusted p-values, written to `out` in input order.
///
/// # Safety
/// `p` must point to `len` readable doubles and `out` to `len` writable ones.
#[no_mangle]
pub unsafe extern "C" fn keyarg_holm(p: *const f64, len: usize, out: *mut f64) -> KeyargStatus {
    guard(|| {
        let p = slice(p, len, "p")?;
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Fail::invalid("p-values must lie in [0, 1]"));
        }
        let adj = holm(p);
        if len > 0 {
            non_null(out, "out")?;
            ptr::copy_nonoverlapping(adj.as_ptr(), out, len);
        }
        Ok(())
    })
}

/// Builds a scheduler over `len` pairs with scores `s1[k]`, `s2[k]`.
///
/// # Safety
/// `s1` and `s2` must point to `len` readable doubles; `out` must be writable.
/// Free the handle with [`keyarg_scheduler_free`].
#[no_mangle]
pub unsafe extern "C" fn keyarg_scheduler_new(
    s1: *const f64,
    s2: *const f64,
    len: usize,
    out: *mut *mut KeyargScheduler,
) -> KeyargStatus {
    guard(|| {
        non_null(out, "out")?;
        let (s1, s2) = (slice(s1, len, "s1")?, slice(s2, len, "s2")?);
        let pairs: Vec<PairId> = (0..len).map(|k| PairId::new(format!("a{k:09}"), format!("b{k:09}"))).collect();
        let records = pairs.iter().zip(s1.iter().zip(s2)).map(|(p, (&x, &y))| PairRecord::unlabeled(p.clone(), x, y));
        let inner = MultiPathScheduler::new(records.collect()).map_err(Fail::invalid)?;
        let index = pairs.iter().cloned().zip(0..).collect();
        out.write(Box::into_raw(Box::new(KeyargScheduler { inner, pairs, index })));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`keyarg_scheduler_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn keyarg_scheduler_free(handle: *mut KeyargScheduler) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

unsafe fn handle<'a>(h: *mut KeyargScheduler) -> Result<&'a mut KeyargScheduler, Fail> {
    non_null(h, "handle")?;
    Ok(&mut *h)
}

fn index_of(s: &KeyargScheduler, pair: &PairId) -> usize {
    s.index[pair]
}

/// Writes up to `cap` pair indices awaiting a human query, one per active
/// path, and their count to `out_len`. A count of 0 means labeling is done.
///
/// # Safety
/// `handle` must be live; `out` must have room for `cap` indices.
#[no_mangle]
pub unsafe extern "C" fn keyarg_scheduler_pending(
    handle_ptr: *mut KeyargScheduler,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> KeyargStatus {
    guard(|| {
        let s = handle(handle_ptr)?;
        let pending: Vec<usize> = s.inner.pending().iter().map(|(_, p)| index_of(s, p)).collect();
        let n = pending.len().min(cap);
        if n > 0 {
            non_null(out, "out")?;
            ptr::copy_nonoverlapping(pending.as_ptr(), out, n);
        }
        write(out_len, n, "out_len")
    })
}

/// Records the votes for pair `index` and writes its majority label.
///
/// # Safety
/// `handle` must be live; `votes` must point to `n_votes` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn keyarg_scheduler_submit(
    handle_ptr: *mut KeyargScheduler,
    index: usize,
    votes: *const u8,
    n_votes: usize,
    out_label: *mut KeyargLabel,
) -> KeyargStatus {
    guard(|| {
        let s = handle(handle_ptr)?;
        let pair = s.pairs.get(index).cloned().ok_or_else(|| Fail(KeyargStatus::NotFound, format!("no pair {index}")))?;
        let votes: Vec<bool> = slice(votes, n_votes, "votes")?.iter().map(|&v| v != 0).collect();
        let outcome = s.inner.submit(&pair, &votes).map_err(|e| Fail(KeyargStatus::Conflict, e.to_string()))?;
        if !out_label.is_null() {
            out_label.write(outcome.label.into());
        }
        Ok(())
    })
}

/// # Safety
/// `handle` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn keyarg_scheduler_label(
    handle_ptr: *mut KeyargScheduler,
    index: usize,
    out: *mut KeyargLabel,
) -> KeyargStatus {
    guard(|| {
        let s = handle(handle_ptr)?;
        let pair = s.pairs.get(index).ok_or_else(|| Fail(KeyargStatus::NotFound, format!("no pair {index}")))?;
        let label = s.inner.record(pair).expect("every input pair has a record").label;
        write(out, label.into(), "out")
    })
}

/// # Safety
/// `handle` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn keyarg_scheduler_stats(handle_ptr: *mut KeyargScheduler, out: *mut KeyargStats) -> KeyargStatus {
    guard(|| {
        let st = handle(handle_ptr)?.inner.stats();
        let stats = KeyargStats {
            total_pairs: st.total_pairs,
            human_queries: st.human_queries,
            propagated: st.propagated,
            delta: st.delta,
            tau: st.tau,
        };
        write(out, stats, "out")
    })
}
