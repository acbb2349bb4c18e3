use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn segmental(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segmental"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SEGMENTAL_DATA")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = segmental(args);
    assert!(
        out.status.success(),
        "segmental {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&[
        "synth", "--out", data.to_str().unwrap(), "--train", "12", "--dev", "4", "--test", "4", "--seed", "3",
    ]);
    data.to_str().unwrap().to_string()
}

const SMALL: [&str; 10] = ["--hidden", "6", "--layers", "1", "--const-epochs", "1", "--decay-epochs", "1", "--max-duration", "8"];

#[test]
fn staged_pipeline_trains_decodes_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (enc, dec, fine, metrics, hyp) = (p("enc.ckpt"), p("dec.ckpt"), p("fine.ckpt"), p("m.jsonl"), p("hyp"));

    let mut args = vec!["train", "--data", &data, "--stage", "enc", "--loss", "ce", "--out", &enc, "--metrics", &metrics];
    args.extend(SMALL);
    ok(&args);
    let mut args = vec!["train", "--data", &data, "--stage", "dec", "--loss", "mll", "--weightfn", "fc", "--init", &enc];
    args.extend(["--out", &dec, "--metrics", &metrics]);
    args.extend(SMALL);
    ok(&args);
    let mut args = vec!["train", "--data", &data, "--stage", "finetune", "--loss", "hinge", "--init", &dec];
    args.extend(["--out", &fine, "--metrics", &metrics]);
    args.extend(SMALL);
    ok(&args);

    let lines: Vec<serde_json::Value> = fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    let stages: Vec<&str> = lines.iter().map(|l| l["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["enc", "enc", "dec", "dec", "finetune", "finetune"]);
    for key in ["epoch", "train_loss", "dev_loss", "dev_per", "wall_time", "step_size", "skipped", "nonfinite"] {
        assert!(lines.iter().all(|l| l.get(key).is_some()), "missing {key}");
    }

    ok(&["decode", "--model", &fine, "--data", &data, "--split", "test", "--out", &hyp]);
    assert_eq!(fs::read_to_string(&hyp).unwrap().lines().count(), 4);
    let reference = format!("{data}/test/text");
    let out = ok(&["eval", "--hyp", &hyp, "--ref", &reference]);
    assert!(out.starts_with("PER "), "{out}");
    let out = ok(&["eval", "--hyp", &reference, "--ref", &reference]);
    assert!(out.starts_with("PER 0.00%"), "{out}");
}

#[test]
fn decoder_stage_requires_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out_path = dir.path().join("x.ckpt");
    let mut args = vec!["train", "--data", &data, "--stage", "dec", "--loss", "log", "--out", out_path.to_str().unwrap()];
    args.extend(SMALL);
    let out = segmental(&args);
    assert!(!out.status.success());
    assert!(!out_path.exists());
}

#[test]
fn stage_and_loss_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out_path = dir.path().join("x.ckpt");
    let out = segmental(&["train", "--data", &data, "--stage", "enc", "--loss", "mll", "--out", out_path.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn thread_count_does_not_change_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let mut bytes = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}.ckpt"));
        let mut args = vec!["--threads", threads, "train", "--data", &data, "--stage", "e2e", "--loss", "log"];
        args.extend(["--batch", "4", "--dropout", "0.2", "--out", out.to_str().unwrap()]);
        args.extend(SMALL);
        ok(&args);
        bytes.push(fs::read(out).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn relative_data_paths_resolve_under_the_data_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_segmental"))
        .args(["synth", "--out", "toy", "--train", "2", "--dev", "1", "--test", "1"])
        .env("SEGMENTAL_DATA", dir.path())
        .current_dir(dir.path().parent().unwrap())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("toy/alphabet.txt").exists());
}

#[test]
fn eval_applies_the_collapse_map_to_both_sides() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp");
    let reference = dir.path().join("ref");
    let map = dir.path().join("map");
    fs::write(&hyp, "a\tx y z\nb\tz\n").unwrap();
    fs::write(&reference, "a\tx x2 z\nb\ty z\nc\tx\n").unwrap();
    fs::write(&map, "x2 y\n").unwrap();
    // a: 1 substitution, b: 1 deletion, c: missing, 1 deletion; 6 reference tokens.
    let out = ok(&["eval", "--hyp", hyp.to_str().unwrap(), "--ref", reference.to_str().unwrap()]);
    assert!(out.starts_with("PER 50.00% (3 errors / 6"), "{out}");
    let out = ok(&[
        "eval", "--hyp", hyp.to_str().unwrap(), "--ref", reference.to_str().unwrap(), "--map", map.to_str().unwrap(),
    ]);
    assert!(out.starts_with("PER 33.33% (2 errors / 6"), "{out}");
}

#[test]
fn gradcheck_reports_every_check_and_succeeds() {
    let out = ok(&["gradcheck", "--component", "losses", "--trials", "3"]);
    assert!(out.lines().count() >= 5);
    assert!(out.lines().all(|l| l.ends_with("ok")), "{out}");
}
