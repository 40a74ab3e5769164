mod common;

use std::fs;
use std::path::Path;

use evonet::run::{evolve, read_state, EvolveOptions};
use evonet::runlog::read_summary;

const FILES: [&str; 5] = ["runlog.csv", "summary.csv", "retrains.csv", "state.json", "best_genome.json"];

fn same_files(a: &Path, b: &Path) {
    for f in FILES {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn interrupted_run_resumes_bitwise() {
    let cfg = common::tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    let st = evolve(&cfg, &full, EvolveOptions::default(), &mut |_| {}).unwrap();
    assert_eq!(st.generation, 3);

    let first = evolve(&cfg, &split, EvolveOptions { stop_after: Some(1), ..EvolveOptions::default() }, &mut |_| {}).unwrap();
    assert_eq!(first.generation, 1);
    assert_eq!(read_state(&split).unwrap().state, first);
    let resumed = evolve(&cfg, &split, EvolveOptions { resume: true, ..EvolveOptions::default() }, &mut |_| {}).unwrap();
    assert_eq!(resumed, st);
    same_files(&full, &split);

    let rows = read_summary(&full).unwrap();
    assert_eq!(rows.len(), 3);
    let runlog = fs::read_to_string(full.join("runlog.csv")).unwrap();
    assert_eq!(runlog.lines().count(), 1 + 3 * 2);
}

#[test]
fn parallel_evaluation_matches_sequential() {
    let cfg = common::tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let (seq, par) = (dir.path().join("seq"), dir.path().join("par"));
    let a = evolve(&cfg, &seq, EvolveOptions::default(), &mut |_| {}).unwrap();
    let b = evolve(&cfg, &par, EvolveOptions { jobs: 3, ..EvolveOptions::default() }, &mut |_| {}).unwrap();
    assert_eq!(a, b);
    same_files(&seq, &par);
}

#[test]
fn resume_refuses_a_changed_configuration() {
    let mut cfg = common::tiny_config();
    let dir = tempfile::tempdir().unwrap();
    evolve(&cfg, dir.path(), EvolveOptions { stop_after: Some(1), ..EvolveOptions::default() }, &mut |_| {}).unwrap();
    cfg.fitness.batch_size = 7;
    let err = evolve(&cfg, dir.path(), EvolveOptions { resume: true, ..EvolveOptions::default() }, &mut |_| {}).unwrap_err();
    assert!(err.to_string().contains("different configuration"), "{err}");
}
