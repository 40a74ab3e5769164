mod common;

use std::fs;
use std::path::Path;

fn evonet(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("evonet").chain(args.iter().copied());
    let code = evonet::cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_2() {
    for args in [
        &[][..],
        &["frobnicate"],
        &["evolve"],
        &["evolve", "--out", "x", "--jobs", "0"],
        &["attack", "--ckpt", "x"],
        &["attack", "--ckpt", "x", "--attack", "cw"],
        &["train", "--genome", "g.json", "--out", "c.bin", "--eps", "abc"],
        &["train", "--genome", "g.json", "--out", "c.bin", "--eps", "-1"],
        &["train", "--genome", "g.json", "--out", "c.bin", "--data", "synthetic", "--config", "c.toml"],
    ] {
        let (code, out, err) = evonet(args);
        assert_eq!(code, 2, "{args:?}: {out}{err}");
        assert!(!err.is_empty(), "{args:?}");
    }
    let (code, out, _) = evonet(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("evolve") && out.contains("attack"));
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let bad_toml = dir.path().join("bad.toml");
    fs::write(&bad_toml, "[evolution]\nlambdaa = 3\n").unwrap();
    for args in [
        vec!["train", "--genome", "/nonexistent/g.json", "--out", "c.bin"],
        vec!["eval", "--ckpt", s(&junk)],
        vec!["attack", "--ckpt", s(&junk), "--attack", "fgsm"],
        vec!["evolve", "--config", s(&bad_toml), "--out", s(dir.path())],
        vec!["plot", "--runlog", s(dir.path()), "--out", "x.svg"],
    ] {
        let (code, _, err) = evonet(&args);
        assert_eq!(code, 1, "{args:?}: {err}");
        assert!(err.starts_with("error: "), "{args:?}: {err}");
    }
}

#[test]
fn train_eval_attack() {
    let dir = tempfile::tempdir().unwrap();
    let genome = dir.path().join("g.json");
    common::desk_seed().write(&genome).unwrap();
    let ckpt = dir.path().join("c.bin");
    let (code, out, err) =
        evonet(&["train", "--genome", s(&genome), "--budget", "15", "--seed", "3", "--out", s(&ckpt)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("trained 15 steps"), "{out}");

    let (code, eval_out, err) = evonet(&["eval", "--ckpt", s(&ckpt)]);
    assert_eq!(code, 0, "{err}");
    let acc_line = |text: &str| text.lines().find(|l| l.starts_with("accuracy:")).map(str::to_string);
    assert_eq!(acc_line(&eval_out), acc_line(&out), "eval disagrees with the score printed after training");

    let csv_path = dir.path().join("attack.csv");
    let (code, out, err) = evonet(&[
        "attack", "--ckpt", s(&ckpt), "--attack", "fgsm,pgd", "--attack", "aa-lite", "--eps", "4/255", "--steps", "3",
        "--limit", "20", "--out", s(&csv_path),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("samples: 20") && out.contains("aa-lite: A ="), "{out}");
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["index", "label", "clean_correct", "fgsm_flipped", "pgd_flipped", "aa-lite_flipped", "robust"]);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 20);
    for row in &rows {
        let flag = |i: usize| &row[i] == "true";
        let robust = flag(2) && !flag(3) && !flag(4) && !flag(5);
        assert_eq!(flag(6), robust);
        // an image counts as flipped only if it was correct to begin with
        assert!(flag(2) || !(flag(3) || flag(4) || flag(5)));
    }
}

#[test]
fn evolve_resume_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_tiny_config(dir.path());
    let run = dir.path().join("run");
    let (code, out, err) = evonet(&["evolve", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().filter(|l| l.starts_with("generation")).count(), 3, "{out}");
    for f in ["config.toml", "state.json", "runlog.csv", "summary.csv", "retrains.csv", "best_genome.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    // a finished run resumes to a no-op; a fresh start into it is refused
    let before = fs::read(run.join("state.json")).unwrap();
    let (code, _, err) = evonet(&["evolve", "--config", s(&cfg), "--out", s(&run), "--resume"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(fs::read(run.join("state.json")).unwrap(), before);
    let (code, _, err) = evonet(&["evolve", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!((code, err.contains("--resume")), (1, true), "{err}");
    let (code, _, err) = evonet(&["evolve", "--config", s(&cfg), "--out", s(&run), "--resume", "--seed", "6"]);
    assert_eq!(code, 1);
    assert!(err.contains("different configuration"), "{err}");

    let svg = dir.path().join("p.svg");
    let (code, _, err) = evonet(&["plot", "--runlog", s(&run.join("runlog.csv")), "--out", s(&svg)]);
    assert_eq!(code, 0, "{err}");
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    let series = dir.path().join("p.csv");
    let (code, _, err) = evonet(&["plot", "--runlog", s(&run), "--out", s(&series)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(fs::read_to_string(&series).unwrap().lines().count(), 1 + 3);
    let (code, _, _) = evonet(&["plot", "--runlog", s(&run), "--out", s(&dir.path().join("p.png"))]);
    assert_eq!(code, 1);
}
