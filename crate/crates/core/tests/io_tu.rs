//! TU dataset ingestion on a hand-written fixture, canonical JSON, and the
//! synthetic task.

use graphmark::calibration::CalibrationReport;
use graphmark::io::{
    emit_report, load_json, load_tudataset, make_synthetic_task, to_canonical_json, write_tudataset, IoError,
};
use graphmark::nn::{Hyper, Model};
use graphmark::watermark::{accuracy, embed, EmbedConfig};
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

/// Graph 1 is a triangle on nodes 1..3 with both edge directions listed;
/// graph 2 is the path 4-5-6 with one duplicated line. Node labels 7 and 9.
fn write_fixture(dir: &Path) {
    fs::write(dir.join("TOY_A.txt"), "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n5, 4\n5, 6\n5, 6\n").unwrap();
    fs::write(dir.join("TOY_graph_indicator.txt"), "1\n1\n1\n2\n2\n2\n").unwrap();
    fs::write(dir.join("TOY_graph_labels.txt"), "1\n-1\n").unwrap();
    fs::write(dir.join("TOY_node_labels.txt"), "7\n7\n9\n9\n7\n9\n").unwrap();
}

fn edge_set(g: &graphmark::Graph) -> BTreeSet<(usize, usize)> {
    g.edges().iter().map(|&(u, v)| (u.min(v), u.max(v))).collect()
}

#[test]
fn toy_fixture_edge_sets() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let ds = load_tudataset(dir.path()).unwrap();
    assert_eq!(ds.name, "TOY");
    assert_eq!(ds.graphs.len(), 2);
    assert_eq!(edge_set(&ds.graphs[0]), BTreeSet::from([(0, 1), (0, 2), (1, 2)]));
    assert_eq!(edge_set(&ds.graphs[1]), BTreeSet::from([(0, 1), (1, 2)]));
    assert_eq!(ds.class_values, vec![-1, 1]);
    assert_eq!(ds.labels, vec![1, 0]);
    assert_eq!(ds.node_label_values, Some(vec![7, 9]));
    let f = ds.graphs[1].features().unwrap();
    assert_eq!(f, &[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
}

#[test]
fn toy_fixture_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let ds = load_tudataset(dir.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    write_tudataset(out.path(), &ds).unwrap();
    assert_eq!(load_tudataset(out.path()).unwrap(), ds);
}

#[test]
fn malformed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    fs::write(dir.path().join("TOY_graph_indicator.txt"), "1\n1\n0\n2\n2\n2\n").unwrap();
    match load_tudataset(dir.path()) {
        Err(IoError::MalformedLine { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a malformed line, got {other:?}"),
    }

    write_fixture(dir.path());
    fs::write(dir.path().join("TOY_A.txt"), "1, 2\n2, x\n").unwrap();
    assert!(matches!(load_tudataset(dir.path()), Err(IoError::MalformedLine { line: 2, .. })));

    write_fixture(dir.path());
    fs::write(dir.path().join("TOY_A.txt"), "1, 2\n5, 7\n").unwrap();
    assert!(matches!(load_tudataset(dir.path()), Err(IoError::IndexOutOfRange { line: 2, .. })));

    write_fixture(dir.path());
    fs::remove_file(dir.path().join("TOY_graph_labels.txt")).unwrap();
    assert!(matches!(load_tudataset(dir.path()), Err(IoError::MissingFile(_))));
}

#[test]
fn canonical_json_contract() {
    let report = CalibrationReport::new(128, 1e-6, 7.6e-4, true).unwrap();
    let a = to_canonical_json(&report).unwrap();
    assert_eq!(a, to_canonical_json(&report).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/calibration.json");
    emit_report(&report, &path).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), a);
    let back: CalibrationReport = load_json(&path).unwrap();
    assert_eq!(back, report);

    // Keys come out sorted.
    let keys: Vec<&str> = a.lines().filter(|l| l.starts_with("  \"")).map(|l| l.trim().split('"').nth(1).unwrap()).collect();
    let mut sorted = keys.clone();
    sorted.sort_unstable();
    assert_eq!(keys, sorted);

    let mut bad = report.clone();
    bad.alpha_bound = f64::NAN;
    assert!(matches!(to_canonical_json(&bad), Err(IoError::NonFinite)));
}

#[test]
fn synthetic_task_contract() {
    let a = make_synthetic_task(200, 3).unwrap();
    let b = make_synthetic_task(200, 3).unwrap();
    assert_eq!(to_canonical_json(&a).unwrap(), to_canonical_json(&b).unwrap());
    assert_ne!(a, make_synthetic_task(200, 4).unwrap());
    assert!(make_synthetic_task(9, 0).is_err());

    let ones = a.labels.iter().filter(|&&l| l == 1).count();
    assert!(ones.abs_diff(100) <= 1);
    let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..200).collect::<Vec<_>>());
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (160, 20, 20));
    for split in [&a.train, &a.val, &a.test] {
        let frac = split.iter().filter(|&&i| a.labels[i] == 1).count() as f64 / split.len() as f64;
        assert!((frac - 0.5).abs() <= 0.1);
    }
    for g in &a.graphs {
        assert!((10..=30).contains(&g.node_count()));
        assert_eq!(g.features().unwrap()[0].len(), 4);
    }
}

#[test]
fn default_backbone_learns_synthetic_task_in_100_epochs() {
    for seed in 0..3u64 {
        let task = make_synthetic_task(500, seed).unwrap();
        let cfg = EmbedConfig { epochs: 100, beta_wm: 0.0, seed, ..EmbedConfig::default() };
        let (model, _) = embed(Model::new(Hyper::default(), seed).unwrap(), &task, None, &cfg).unwrap();
        let acc = accuracy(&model, &task, &task.test).unwrap();
        assert!(acc >= 0.9, "seed {seed}: test accuracy {acc}");
    }
}
