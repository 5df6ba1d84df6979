use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use keyarg_ffi::*;

fn last_error() -> String {
    let p = keyarg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(keyarg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn scalar_functions() {
    let mut out = 0.0;
    let (u, v) = ([1.0, 0.0], [1.0, 1.0]);
    assert_eq!(unsafe { keyarg_cosine_similarity(u.as_ptr(), v.as_ptr(), 2, &mut out) }, KeyargStatus::Ok);
    assert!((out - 0.5f64.sqrt()).abs() < 1e-12);
    assert!(keyarg_last_error().is_null());

    let zero = [0.0, 0.0];
    assert_eq!(
        unsafe { keyarg_cosine_similarity(u.as_ptr(), zero.as_ptr(), 2, &mut out) },
        KeyargStatus::InvalidArgument
    );
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { keyarg_cosine_similarity(ptr::null(), v.as_ptr(), 2, &mut out) }, KeyargStatus::NullPointer);
    assert!(last_error().contains("u is null"));

    let (a, b) = ([3u32, 0, 0], [3u32, 0, 0]);
    assert_eq!(unsafe { keyarg_topic_similarity(a.as_ptr(), b.as_ptr(), 3, &mut out) }, KeyargStatus::Ok);
    assert_eq!(out, 1.0);

    let op = CString::new("In addition, it is difficult to control.").unwrap();
    let arg = CString::new("It is difficult to control.").unwrap();
    assert_eq!(unsafe { keyarg_overlap_ratio(op.as_ptr(), arg.as_ptr(), &mut out) }, KeyargStatus::Ok);
    assert_eq!(out, 1.0);
    let empty = CString::new("").unwrap();
    assert_eq!(unsafe { keyarg_overlap_ratio(op.as_ptr(), empty.as_ptr(), &mut out) }, KeyargStatus::InvalidArgument);
}

#[test]
fn agreement_functions() {
    let mut out = 0.0;
    // two raters: agree, agree, disagree
    let votes = [1u8, 1, 0, 0, 1, 0];
    assert_eq!(unsafe { keyarg_pabak(votes.as_ptr(), 3, 2, &mut out) }, KeyargStatus::Ok);
    assert!((out - 1.0 / 3.0).abs() < 1e-12);

    let m = [1.0, 2.0, 2.0, 3.0, 4.0, 4.0];
    assert_eq!(unsafe { keyarg_icc3k(m.as_ptr(), 3, 2, &mut out) }, KeyargStatus::Ok);
    assert!((out - 18.0 / 19.0).abs() < 1e-12);

    let p = [0.01, 0.04, 0.03];
    let mut adj = [0.0; 3];
    assert_eq!(unsafe { keyarg_holm(p.as_ptr(), 3, adj.as_mut_ptr()) }, KeyargStatus::Ok);
    for (a, e) in adj.iter().zip([0.03, 0.06, 0.06]) {
        assert!((a - e).abs() < 1e-12);
    }
    let bad = [1.5];
    assert_eq!(unsafe { keyarg_holm(bad.as_ptr(), 1, adj.as_mut_ptr()) }, KeyargStatus::InvalidArgument);
}

#[test]
fn scheduler_handle_lifecycle() {
    // one chain of five pairs; threshold between index 2 and 3
    let s1 = [0.1, 0.2, 0.3, 0.4, 0.5];
    let s2 = [0.1, 0.2, 0.3, 0.4, 0.5];
    let mut h: *mut KeyargScheduler = ptr::null_mut();
    assert_eq!(unsafe { keyarg_scheduler_new(s1.as_ptr(), s2.as_ptr(), 5, &mut h) }, KeyargStatus::Ok);
    assert!(!h.is_null());
    let mut queries = 0;
    loop {
        let mut buf = [0usize; 4];
        let mut n = 0;
        assert_eq!(unsafe { keyarg_scheduler_pending(h, buf.as_mut_ptr(), 4, &mut n) }, KeyargStatus::Ok);
        if n == 0 {
            break;
        }
        for &k in &buf[..n] {
            let vote = [u8::from(k >= 3)];
            let mut label = KeyargLabel::Unlabeled;
            assert_eq!(unsafe { keyarg_scheduler_submit(h, k, vote.as_ptr(), 1, &mut label) }, KeyargStatus::Ok);
            assert_eq!(label == KeyargLabel::Similar, k >= 3);
            queries += 1;
        }
    }
    assert!(queries <= 3);
    for k in 0..5 {
        let mut label = KeyargLabel::Unlabeled;
        assert_eq!(unsafe { keyarg_scheduler_label(h, k, &mut label) }, KeyargStatus::Ok);
        assert_eq!(label, if k >= 3 { KeyargLabel::Similar } else { KeyargLabel::Dissimilar });
    }
    let mut stats = KeyargStats::default();
    assert_eq!(unsafe { keyarg_scheduler_stats(h, &mut stats) }, KeyargStatus::Ok);
    assert_eq!((stats.total_pairs, stats.human_queries), (5, queries));
    assert_eq!(stats.human_queries + stats.propagated, 5);

    let vote = [1u8];
    assert_eq!(unsafe { keyarg_scheduler_submit(h, 9, vote.as_ptr(), 1, ptr::null_mut()) }, KeyargStatus::NotFound);
    assert_eq!(unsafe { keyarg_scheduler_submit(h, 0, vote.as_ptr(), 1, ptr::null_mut()) }, KeyargStatus::Conflict);
    unsafe { keyarg_scheduler_free(h) };
    unsafe { keyarg_scheduler_free(ptr::null_mut()) };
    assert_eq!(unsafe { keyarg_scheduler_stats(ptr::null_mut(), &mut stats) }, KeyargStatus::NullPointer);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/keyarg.h")).unwrap();
    for name in [
        "keyarg_last_error",
        "keyarg_version",
        "keyarg_cosine_similarity",
        "keyarg_topic_similarity",
        "keyarg_overlap_ratio",
        "keyarg_pabak",
        "keyarg_icc3k",
        "keyarg_holm",
        "keyarg_scheduler_new",
        "keyarg_scheduler_free",
        "keyarg_scheduler_pending",
        "keyarg_scheduler_submit",
        "keyarg_scheduler_label",
        "keyarg_scheduler_stats",
        "typedef struct KeyargScheduler KeyargScheduler",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "keyarg.h"

int main(void) {
    double s1[] = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
    KeyargScheduler *h = NULL;
    if (keyarg_scheduler_new(s1, s1, 7, &h) != KEYARG_STATUS_OK) return 1;
    size_t pending[8];
    size_t n = 0;
    for (;;) {
        if (keyarg_scheduler_pending(h, pending, 8, &n) != KEYARG_STATUS_OK) return 2;
        if (n == 0) break;
        for (size_t i = 0; i < n; i++) {
            uint8_t vote = pending[i] >= 4;
            if (keyarg_scheduler_submit(h, pending[i], &vote, 1, NULL) != KEYARG_STATUS_OK) return 3;
        }
    }
    KeyargStats stats;
    if (keyarg_scheduler_stats(h, &stats) != KEYARG_STATUS_OK) return 4;
    keyarg_scheduler_free(h);
    double zero[] = {0.0, 0.0}, one[] = {1.0, 0.0}, out = 0.0;
    if (keyarg_cosine_similarity(zero, one, 2, &out) != KEYARG_STATUS_INVALID_ARGUMENT) return 5;
    if (keyarg_last_error() == NULL) return 6;
    printf("%zu %zu %s\n", stats.total_pairs, stats.human_queries, keyarg_version());
    return 0;
}
"#;

#[test]
fn c_program_links_against_static_library() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("libkeyarg_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    let bin = tmp.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = text.split_whitespace().collect();
    assert_eq!(fields[0], "7");
    assert!(fields[1].parse::<usize>().unwrap() <= 3);
    assert_eq!(fields[2], env!("CARGO_PKG_VERSION"));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
