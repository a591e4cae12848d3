use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avforensics")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    // micro model so the test stays fast
    std::fs::write(
        &cfg,
        r#"{"model": {"patch": {"d": 8}, "phoneme": {"d": 8, "n_heads": 2, "n_blocks": 1},
             "viseme": {"d": 8, "n_heads": 2, "n_blocks": 1}, "face": {"d": 8, "n_heads": 2, "n_blocks": 1},
             "d_c": 6, "fusion_k": 4},
            "train": {"epochs": 1, "batch": 4, "probe_clips": 4}}"#,
    )
    .unwrap();
    let pre = dir.path().join("pre");
    let ft = dir.path().join("ft");
    let (m0, m1) = (dir.path().join("m0.avfp"), dir.path().join("m1.avfp"));

    let o = cli(&["gen", "--out", p(&pre), "--n-real", "8", "--n-fake", "0", "--set", "gen.id_prefix=pre"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = cli(&["gen", "--out", p(&ft), "--n-real", "4", "--n-fake", "4"]);
    assert!(o.status.success());

    let o = cli(&["pretrain", "--config", p(&cfg), "--corpus", p(&pre), "--model-out", p(&m0)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let h: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(h["probe"].as_array().unwrap().len(), 2);

    let o = cli(&["finetune", "--config", p(&cfg), "--corpus", p(&ft), "--model", p(&m0), "--model-out", p(&m1)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let out = dir.path().join("metrics.json");
    let o = cli(&["eval", "--model", p(&m1), "--corpus", p(&ft), "--out", p(&out)]);
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(m["n_videos"], 8);

    let o = cli(&["perturb-eval", "--model", p(&m1), "--corpus", p(&ft), "--kinds", "noise,blur"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["perturbed"]["noise"].as_array().unwrap().len(), 5);

    let o = cli(&["gradcheck", "--config", p(&cfg), "--corpus", p(&pre), "--model", p(&m0), "--per-tensor", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let hist = dir.path().join("hist.json");
    std::fs::write(&hist, serde_json::to_string(&h).unwrap()).unwrap();
    let svg = dir.path().join("loss.svg");
    let o = cli(&["plot", p(&hist), "--out", p(&svg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // unknown config field: validation
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"epochz": 3}}"#).unwrap();
    let o = cli(&["gen", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    // pretraining on fakes: validation
    let c = dir.path().join("c");
    assert!(cli(&["gen", "--out", p(&c), "--n-real", "2", "--n-fake", "2"]).status.success());
    let o = cli(&["pretrain", "--corpus", p(&c), "--model-out", p(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));
    // missing checkpoint: runtime
    let o = cli(&["eval", "--model", p(&dir.path().join("nope.avfp")), "--corpus", p(&c)]);
    assert_eq!(o.status.code(), Some(1));
    // bad flag: clap usage error
    assert_eq!(cli(&["eval", "--bogus"]).status.code(), Some(2));
    let o = cli(&["experiment", "no_such_experiment"]);
    assert_eq!(o.status.code(), Some(2));
}
