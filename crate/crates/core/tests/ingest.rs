use std::fs;
use std::path::Path;

use wavegraph::data_io::{ingest_ogw, Store};
use wavegraph::geometry::LayoutMetadata;
use wavegraph::signal_prep::SampleLabel;
use wavegraph::Error;

const PATHS: usize = 66;
const ROWS: usize = 8;

fn value(file: usize, r: usize, c: usize) -> f64 {
    (file as f64 + 1.0) * 0.001 * (r as f64 - 3.5) + c as f64 * 1e-4
}

fn write_csv(path: &Path, file: usize, header: bool, cols: usize) {
    let mut text = String::new();
    if header {
        let names: Vec<String> = (0..cols).map(|c| format!("path{c}")).collect();
        text.push_str(&names.join(","));
        text.push('\n');
    }
    for r in 0..ROWS {
        let row: Vec<String> = (0..cols).map(|c| format!("{:e}", value(file, r, c))).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

fn source(dir: &Path, broken: bool) -> std::path::PathBuf {
    let src = dir.join(if broken { "broken" } else { "src" });
    fs::create_dir_all(&src).unwrap();
    let entries = [
        ("a.csv", 100e3, vec!["D7"]),
        ("b.csv", 100e3, vec![]),
        ("c.csv", 50e3, vec!["D7"]),
        ("d.csv", 100e3, vec!["D7", "D8"]),
        ("e.csv", 100e3, vec!["D7"]),
    ];
    let measurements: Vec<serde_json::Value> = entries
        .iter()
        .map(|(f, hz, d)| serde_json::json!({ "file": f, "excitation_hz": hz, "damage": d }))
        .collect();
    let index = serde_json::json!({ "sampling_rate_hz": 1e6, "measurements": measurements });
    fs::write(src.join("index.json"), index.to_string()).unwrap();
    for (i, (f, _, _)) in entries.iter().enumerate() {
        let cols = if broken && *f == "e.csv" { PATHS - 1 } else { PATHS };
        write_csv(&src.join(f), i, i == 0, cols);
    }
    src
}

#[test]
fn ingest_keeps_single_defect_runs_at_the_excitation_and_round_trips_values() {
    let dir = tempfile::tempdir().unwrap();
    let src = source(dir.path(), false);
    let root = dir.path().join("store");
    let store = ingest_ogw(&src, &root, 100e3).unwrap();
    assert_eq!(store.ids(), ["D7_00", "D7_01", "P_000"]);

    let reopened = Store::open(&root).unwrap();
    let d7 = LayoutMetadata::default_ogw().catalog().unwrap().get("D7").unwrap();
    for (id, file) in [("D7_00", 0), ("P_000", 1), ("D7_01", 4)] {
        let s = reopened.load::<f64>(id).unwrap();
        assert_eq!(s.signals.shape(), (ROWS, PATHS));
        assert_eq!(s.sampling_rate_hz, 1e6);
        for r in 0..ROWS {
            for c in 0..PATHS {
                let want: f64 = format!("{:e}", value(file, r, c)).parse().unwrap();
                assert_eq!(s.signals[(r, c)], want);
            }
        }
        match s.label {
            SampleLabel::Damaged { label, coordinate } => {
                assert_eq!(label, "D7");
                assert_eq!(coordinate, d7);
            }
            SampleLabel::Pristine => assert_eq!(id, "P_000"),
        }
    }
}

#[test]
fn failed_ingest_leaves_an_existing_store_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("store");
    ingest_ogw(&source(dir.path(), false), &root, 100e3).unwrap();
    let before = fs::read(root.join("manifest.json")).unwrap();

    let err = ingest_ogw(&source(dir.path(), true), &root, 100e3).unwrap_err();
    assert!(matches!(err, Error::Schema { .. }), "{err}");
    assert_eq!(fs::read(root.join("manifest.json")).unwrap(), before);
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains("staging"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn ingest_without_matching_measurements_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let src = source(dir.path(), false);
    let root = dir.path().join("store");
    assert!(matches!(ingest_ogw(&src, &root, 250e3), Err(Error::Ingestion { .. })));
    assert!(!root.exists());
}
