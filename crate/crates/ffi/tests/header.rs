//! The generated header must stand alone as C99 and as C++.

use std::path::Path;
use std::process::Command;

fn header_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/normlens.h")
}

#[test]
fn header_compiles_as_c99() {
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-xc"])
        .arg(header_path())
        .status()
        .expect("cc is installed");
    assert!(status.success(), "header rejected by cc");
}

#[test]
fn header_compiles_as_cpp() {
    let status = Command::new("c++")
        .args(["-std=c++17", "-Wall", "-Werror", "-fsyntax-only", "-xc++"])
        .arg(header_path())
        .status()
        .expect("c++ is installed");
    assert!(status.success(), "header rejected by c++");
}

#[test]
fn header_declares_every_exported_symbol() {
    let body = std::fs::read_to_string(header_path()).unwrap();
    for symbol in [
        "nl_version",
        "nl_last_error_message",
        "nl_string_free",
        "nl_norms_load_jsonl",
        "nl_norms_len",
        "nl_norms_filter_country",
        "nl_norms_to_jsonl",
        "nl_norms_free",
        "nl_prompts_generate_jsonl",
        "nl_judge_parse",
        "nl_report_table2",
    ] {
        assert!(body.contains(symbol), "header is missing {symbol}");
    }
}
