use wavegraph::data_io::{generate_synthetic, Store, SyntheticConfig};
use wavegraph::dataset::{prepare_split, PrepConfig};
use wavegraph::geometry::SplitName;
use wavegraph::signal_prep::BandSpec;

fn desk_prep() -> PrepConfig {
    PrepConfig {
        band: BandSpec {
            low_hz: 69.4e3,
            high_hz: 128e3,
            bins: 60,
        },
        ..PrepConfig::default()
    }
}

#[test]
fn noiseless_pipeline_recovers_oracle_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        noise_level: 0.0,
        ..SyntheticConfig::default()
    };
    let store = generate_synthetic(&cfg, 7, &dir.path().join("store")).unwrap();
    let oracle = store.oracle().unwrap().unwrap();
    let prepared = prepare_split::<f64>(&store, SplitName::A, 0, &desk_prep()).unwrap();
    let parents = prepared.fwd_paths.parent_indices().to_vec();
    let max_train = prepared
        .train
        .iter()
        .flat_map(|s| parents.iter().map(|&p| oracle.deviations[&s.id][p]))
        .fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for s in prepared.train.iter().chain(&prepared.val).chain(&prepared.test) {
        for (f, &p) in parents.iter().enumerate() {
            let expected = (oracle.deviations[&s.id][p] / max_train).min(1.0);
            worst = worst.max((s.delta_e[f] - expected).abs());
        }
    }
    assert!(worst < 0.02, "worst deviation mismatch {worst}");
}

#[test]
fn noisy_pipeline_targets_lie_in_unit_interval_and_pristine_is_quiet() {
    let dir = tempfile::tempdir().unwrap();
    let store = generate_synthetic(&SyntheticConfig::default(), 3, &dir.path().join("store")).unwrap();
    let prepared = prepare_split::<f64>(&store, SplitName::B, 1, &desk_prep()).unwrap();
    let all: Vec<_> = prepared.train.iter().chain(&prepared.val).chain(&prepared.test).collect();
    assert!(all.iter().all(|s| s.delta_e.iter().all(|v| (0.0..=1.0).contains(v))));
    let pristine: Vec<f64> = all
        .iter()
        .filter(|s| !s.is_damaged())
        .flat_map(|s| s.delta_e.iter().copied())
        .collect();
    let mean = pristine.iter().sum::<f64>() / pristine.len() as f64;
    assert!(mean < 0.05, "pristine mean deviation {mean}");
    assert!(prepared.train.iter().any(|s| s.delta_e.iter().any(|&v| v == 1.0)));
}

#[test]
fn synthetic_generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SyntheticConfig::default();
    cfg.pristine_samples = 13;
    let a = generate_synthetic(&cfg, 5, &dir.path().join("a")).unwrap();
    let b = generate_synthetic(&cfg, 5, &dir.path().join("b")).unwrap();
    assert_eq!(a.ids(), b.ids());
    for id in a.ids() {
        let fa = std::fs::read(a.root().join("samples").join(format!("{id}.bin"))).unwrap();
        let fb = std::fs::read(b.root().join("samples").join(format!("{id}.bin"))).unwrap();
        assert_eq!(fa, fb);
    }
    let reopened = Store::open(a.root()).unwrap();
    assert_eq!(reopened.ids().len(), 28 + 13);
}
