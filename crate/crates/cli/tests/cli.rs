use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use t2l_cli::manifest::{Manifest, Status};

const TINY: &str = r#"
rank = 2
d_task = 16
[tasks]
n_train = 48
n_test = 8
n_descriptions = 4
[base]
d_model = 16
d_ff = 32
[hyper]
d_hidden = 16
d_out = 16
d_task_enc = 8
d_embed = 4
[pretrain]
max_steps = 20
batch_size = 8
[lora]
max_steps = 8
batch_size = 4
[multitask]
max_steps = 8
[recon]
max_steps = 10
[sft]
max_steps = 6
batch_size = 4
"#;

fn t2l(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_t2l"))
        .args(args)
        .current_dir(dir)
        .env_remove("T2L_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = t2l(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().to_path_buf();
    std::fs::write(p.join("tiny.toml"), TINY).unwrap();
    (tmp, p)
}

#[test]
fn flops_prints_the_exact_totals() {
    let (_t, d) = workspace();
    let out = ok(&d, &["flops", "--preset", "paper", "--out", "f"]);
    for n in ["826781204480", "4176855695360", "29217521664", "5373952", "0.856005 TFLOPs"] {
        assert!(out.contains(n), "{n} missing from\n{out}");
    }
    assert_eq!(Manifest::load(&d.join("f/manifest.toml")).unwrap().status, Status::Complete);
}

#[test]
fn usage_errors_exit_nonzero() {
    let (_t, d) = workspace();
    assert_eq!(t2l(&d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(t2l(&d, &["make-suite", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(t2l(&d, &["flops", "--preset", "tiny"]).status.code(), Some(2));
}

#[test]
fn misspelled_config_keys_are_rejected() {
    let (_t, d) = workspace();
    std::fs::write(d.join("bad.toml"), "rnak = 3\n").unwrap();
    let o = t2l(&d, &["make-suite", "--config", "bad.toml", "--out", "s"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("rnak") && err.contains("rank"), "{err}");
    let o = t2l(&d, &["make-suite", "--set", "tasks.n_trian=3", "--out", "s"]);
    assert_eq!(o.status.code(), Some(1));
    let o = t2l(&d, &["make-suite", "--config", "missing.toml", "--out", "s"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let (_t, d) = workspace();
    let o = Command::new(env!("CARGO_BIN_EXE_t2l"))
        .args(["make-suite", "--out", "s"])
        .current_dir(&d)
        .env("T2L_SEED", "5")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(Manifest::load(&d.join("s/manifest.toml")).unwrap().seed, 5);
    ok(&d, &["make-suite", "--seed", "6", "--out", "s6"]);
    assert_eq!(Manifest::load(&d.join("s6/manifest.toml")).unwrap().seed, 6);
}

#[test]
fn resume_skips_finished_stages() {
    let (_t, d) = workspace();
    let first = ok(&d, &["pretrain-base", "--config", "tiny.toml", "--out", "b"]);
    assert!(first.contains("pretrain\t"));
    let before = std::fs::read(d.join("b/base.t2lb")).unwrap();
    let again = ok(&d, &["pretrain-base", "--config", "tiny.toml", "--out", "b", "--resume"]);
    assert!(!again.contains("pretrain\t"), "{again}");
    assert_eq!(std::fs::read(d.join("b/base.t2lb")).unwrap(), before);
    let m = Manifest::load(&d.join("b/manifest.toml")).unwrap();
    assert_eq!(m.stages, ["suite", "pretrain"]);
    let o = t2l(&d, &["pretrain-base", "--config", "tiny.toml", "--seed", "9", "--out", "b", "--resume"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot resume"));
}

#[test]
fn pipeline_round_trip_and_exact_rerun() {
    let (_t, d) = workspace();
    let cfg = ["--config", "tiny.toml"];
    let with = |args: &[&'static str]| -> Vec<&'static str> { args.iter().chain(&cfg).copied().collect() };
    ok(&d, &with(&["make-suite", "--out", "s"]));
    ok(&d, &with(&["pretrain-base", "--suite", "s/suite.txt", "--out", "b"]));
    ok(
        &d,
        &with(&["build-library", "--suite", "s/suite.txt", "--base", "b/base.t2lb", "--out", "lib"]),
    );
    let lib = "lib/library/library.manifest";
    assert_eq!(t2l_core::lora::load_library(d.join(lib)).unwrap().len(), 13);
    ok(&d, &with(&["train-t2l-recon", "--library", lib, "--arch", "L", "--out", "r"]));
    ok(
        &d,
        &["generate", "--ckpt", "r/hypernet.t2lh", "--embeddings", "onehot", "--task-index", "2", "--out", "g/a.t2la"],
    );
    assert!(d.join("g/a.t2la.manifest.toml").exists());
    let o = t2l(&d, &["generate", "--ckpt", "r/hypernet.t2lh", "--embeddings", "onehot", "--describe", "x", "--out", "b.t2la"]);
    assert_eq!(o.status.code(), Some(1));

    ok(&d, &with(&["train-t2l-sft", "--suite", "s/suite.txt", "--base", "b/base.t2lb", "--out", "sft"]));
    ok(&d, &["generate", "--ckpt", "sft/hypernet.t2lh", "--describe", "sort the tokens ascending", "--out", "a.t2la"]);
    let a = t2l_core::lora::load_adapter(d.join("a.t2la")).unwrap();
    assert_eq!(a.description, "sort the tokens ascending");

    let eval = with(&[
        "eval", "--suite", "s/suite.txt", "--base", "b/base.t2lb", "--split", "all", "--adapter", "a.t2la",
        "--library", lib, "--ckpt", "sft/hypernet.t2lh", "--out", "ev",
    ]);
    ok(&d, &eval);
    let report = std::fs::read_to_string(d.join("ev/report.tsv")).unwrap();
    let parsed = t2l_core::eval::EvalReport::parse(&report).unwrap();
    assert_eq!(parsed.entries.len(), 16 * 3 + 13);

    std::fs::remove_file(d.join("tiny.toml")).unwrap();
    ok(&d, &["rerun", "--manifest", "ev/manifest.toml", "--out", "ev2"]);
    assert_eq!(std::fs::read_to_string(d.join("ev2/report.tsv")).unwrap(), report);
    ok(&d, &["rerun", "--manifest", "r/manifest.toml", "--out", "r2"]);
    assert_eq!(
        std::fs::read(d.join("r/hypernet.t2lh")).unwrap(),
        std::fs::read(d.join("r2/hypernet.t2lh")).unwrap()
    );
}

#[test]
fn similarity_study_writes_correlations() {
    let (_t, d) = workspace();
    let out = ok(&d, &["study", "similarity", "--config", "tiny.toml", "--out", "sim"]);
    assert!(d.join("sim/similarity.tsv").exists());
    assert!(!out.is_empty());
}
