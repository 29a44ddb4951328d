use std::path::Path;
use std::process::{Command, Output};

fn wavegraph(args: &[&str], store: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wavegraph"));
    cmd.args(args).env("RUST_LOG", "info");
    match store {
        Some(s) => cmd.env("WAVEGRAPH_STORE", s),
        None => cmd.env_remove("WAVEGRAPH_STORE"),
    };
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn end_to_end_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let o = wavegraph(&["synth", "--seed", "3"], Some(&store));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(store.join("manifest.json").exists());

    let o = wavegraph(&["prep", "--split", "A", "--seeds", "0", "--out", out_s], Some(&store));
    assert!(o.status.success(), "{}", stderr(&o));
    let cache = out.join("prep/A_0.json");
    let first = std::fs::read(&cache).unwrap();
    let o = wavegraph(&["prep", "--split", "A", "--seeds", "0", "--out", out_s], Some(&store));
    assert!(o.status.success());
    assert!(stderr(&o).contains("reusing cached preprocessing"), "{}", stderr(&o));
    assert_eq!(first, std::fs::read(&cache).unwrap());

    let train = [
        "train", "--split", "A", "--model", "wgn-coupled", "--seeds", "0,1", "--parallel", "--epochs", "1,1,2",
        "--warmup", "1", "--ramp", "1", "--out", out_s,
    ];
    let o = wavegraph(&train, Some(&store));
    assert!(o.status.success(), "{}", stderr(&o));
    for seed in [0, 1] {
        let m: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out.join(format!("runs/A_wgn-coupled_{seed}/manifest.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(m["seed"], seed);
        assert_eq!(m["config"]["coupling"]["ramp"], 1);
        assert_eq!(m["forward_checksum_before_stage3"], m["forward_checksum_after_stage3"]);
    }

    let o = wavegraph(
        &["eval", "--split", "A", "--models", "wgn-coupled", "--seeds", "0,1", "--out", out_s],
        Some(&store),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.json", "report.md", "maps/A_wgn-coupled_0.png", "maps/A_wgn-coupled_1.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report = std::fs::read(out.join("report.json")).unwrap();

    let o = wavegraph(&["report", "--out", out_s], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(report, std::fs::read(out.join("report.json")).unwrap());

    // expecting runs that were never trained is a report error listing the gaps
    let o = wavegraph(&["report", "--out", out_s, "--models", "gat", "--seeds", "0"], None);
    assert_eq!(o.status.code(), Some(7));
    assert!(stderr(&o).contains("split A model gat seed 0"));

    let o = wavegraph(&["eval", "--split", "A", "--models", "lstm", "--seeds", "0", "--out", out_s], Some(&store));
    assert_eq!(o.status.code(), Some(7));
}

#[test]
fn usage_and_input_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = wavegraph(&["train", "--no-such-flag"], None);
    assert_eq!(o.status.code(), Some(2));

    let missing = dir.path().join("nowhere");
    let o = wavegraph(&["prep", "--out", dir.path().to_str().unwrap()], Some(&missing));
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let err: serde_json::Value = serde_json::from_str(stderr(&o).lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "missing-input");

    let store = dir.path().join("store");
    assert!(wavegraph(&["synth"], Some(&store)).status.success());
    let o = wavegraph(
        &["train", "--model", "wgn-coupled", "--epochs", "1,1", "--out", dir.path().to_str().unwrap()],
        Some(&store),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = wavegraph(&["train", "--model", "resnet", "--out", dir.path().to_str().unwrap()], Some(&store));
    assert_eq!(o.status.code(), Some(3));
}
