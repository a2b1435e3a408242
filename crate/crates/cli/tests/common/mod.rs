#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use im2latex::corpus::{synthetic_corpus, write_corpus, FormulaRecord};

pub fn im2latex(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_im2latex"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Synthetic corpus of `n` records under `dir/corpus`.
pub fn corpus(dir: &Path, n: usize, seed: u64) -> Vec<FormulaRecord> {
    let records = synthetic_corpus(n, seed, 20, 80);
    write_corpus(&dir.join("corpus"), &records).unwrap();
    records
}

/// Ship a split that puts every record in all three partitions.
pub fn provided_split_everywhere(dir: &Path, records: &[FormulaRecord]) {
    let splits = dir.join("corpus/splits");
    fs::create_dir_all(&splits).unwrap();
    let ids: String = records.iter().map(|r| format!("{}\n", r.id)).collect();
    for f in ["train.txt", "val.txt", "test.txt"] {
        fs::write(splits.join(f), &ids).unwrap();
    }
}

#[track_caller]
pub fn assert_exit(o: &Output, code: i32) {
    assert_eq!(
        o.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        stderr(o)
    );
}
