use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use curator_core::lifecycle::state::{self, POOL_DIR};
use curator_core::lifecycle::{Engine, EngineConfig, MANIFEST_FILE};
use curator_core::metrics::{average_accuracy, forgetting_rate, per_skill_maxima, relative_gain, MetricsReport};
use curator_core::synthgen::{generate, write_stream, GroundTruth, StreamSpec};
use curator_core::{Error, PerformanceTable};
use tempfile::TempDir;

struct Stream {
    _dir: TempDir,
    bundles: Vec<PathBuf>,
    labels: Vec<Vec<GroundTruth>>,
}

fn stream(spec: &StreamSpec) -> Stream {
    let dir = tempfile::tempdir().unwrap();
    let steps = generate(spec).unwrap();
    let bundles = write_stream(dir.path(), &steps).unwrap();
    Stream {
        _dir: dir,
        bundles,
        labels: steps.into_iter().map(|s| s.labels).collect(),
    }
}

fn config(budget: usize, seed: u64) -> EngineConfig {
    EngineConfig {
        budget,
        seed,
        k_grid: vec![3, 5, 10],
        ..EngineConfig::default()
    }
}

fn current_file(state_dir: &Path, name: &str) -> Vec<u8> {
    let v = state::current_version(state_dir).unwrap().unwrap();
    fs::read(state::version_dir(state_dir, v).join(name)).unwrap()
}

#[test]
fn small_first_bundle_is_selected_whole() {
    let s = stream(&StreamSpec::uniform(1, 5, 200, 1));
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    let out = engine.advance(&s.bundles[0], &config(25_000, 1), None).unwrap();
    assert_eq!(out.timestep, 0);
    assert_eq!(out.manifest.entries.len(), 1000);
    let ids: BTreeSet<_> = out.manifest.sample_ids().collect();
    assert_eq!(ids.len(), 1000);
}

#[test]
fn replay_is_byte_identical() {
    let s = stream(&StreamSpec::uniform(2, 4, 60, 2));
    let mut manifests = Vec::new();
    for _ in 0..2 {
        let state_dir = tempfile::tempdir().unwrap();
        let engine = Engine::open(state_dir.path()).unwrap();
        for b in &s.bundles {
            engine.advance(b, &config(40, 17), None).unwrap();
        }
        manifests.push((
            current_file(state_dir.path(), MANIFEST_FILE),
            current_file(state_dir.path(), state::INDEX_FILE),
        ));
    }
    assert_eq!(manifests[0], manifests[1]);
}

#[test]
fn every_pooled_skill_appears_in_every_manifest() {
    let s = stream(&StreamSpec::uniform(5, 5, 60, 3));
    let cfg = EngineConfig {
        k_grid: vec![5, 10, 15],
        ..config(40, 5)
    };
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    let skill_of: BTreeMap<String, usize> = s.labels.iter().flatten().map(|l| (l.id.clone(), l.skill)).collect();
    let mut pooled = BTreeSet::new();
    for b in &s.bundles {
        let before: BTreeSet<String> = engine
            .load()
            .unwrap()
            .map(|st| st.pool.samples().iter().map(|r| r.sample_id.clone()).collect())
            .unwrap_or_default();
        let out = engine.advance(b, &cfg, None).unwrap();
        assert!(out.manifest.entries.len() <= 40);
        let pool_now: BTreeSet<String> = engine
            .load()
            .unwrap()
            .unwrap()
            .pool
            .samples()
            .iter()
            .map(|r| r.sample_id.clone())
            .collect();
        for id in out.manifest.sample_ids() {
            assert!(pool_now.contains(id) || before.contains(id));
            pooled.insert(skill_of[id]);
        }
        let skills: BTreeSet<usize> = out.manifest.sample_ids().map(|id| skill_of[id]).collect();
        assert_eq!(skills, (0..5).collect());
    }
    assert_eq!(pooled.len(), 5);
}

#[test]
fn failed_advance_leaves_previous_version() {
    let s = stream(&StreamSpec::uniform(2, 3, 50, 4));
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    engine.advance(&s.bundles[0], &config(30, 1), None).unwrap();
    let before = current_file(state_dir.path(), state::INDEX_FILE);

    let bad = EngineConfig {
        pool_budget: Some(1),
        ..config(30, 1)
    };
    let err = engine.advance(&s.bundles[1], &bad, None).unwrap_err();
    assert!(matches!(err, Error::PoolBudgetBelowClusters { .. }), "{err}");
    assert_eq!(state::current_version(state_dir.path()).unwrap(), Some(1));
    assert_eq!(current_file(state_dir.path(), state::INDEX_FILE), before);
    let loaded = engine.load().unwrap().unwrap();
    assert_eq!(loaded.pool.len(), 150);

    let out = engine.advance(&s.bundles[1], &config(30, 1), None).unwrap();
    assert_eq!(out.version, 2);
    assert_eq!(out.timestep, 1);
}

#[test]
fn uncommitted_leftovers_are_discarded() {
    let s = stream(&StreamSpec::uniform(2, 3, 40, 5));
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    engine.advance(&s.bundles[0], &config(30, 1), None).unwrap();
    let orphan = state::version_dir(state_dir.path(), 2);
    fs::create_dir_all(&orphan).unwrap();
    fs::write(orphan.join("junk"), b"x").unwrap();
    engine.advance(&s.bundles[1], &config(30, 1), None).unwrap();
    assert!(!orphan.join("junk").exists());
    assert!(engine.load().unwrap().is_some());
}

#[test]
fn corrupted_state_is_rejected() {
    let s = stream(&StreamSpec::uniform(1, 3, 40, 6));
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    engine.advance(&s.bundles[0], &config(30, 1), None).unwrap();
    let grad = state::version_dir(state_dir.path(), 1).join(POOL_DIR).join("grad.f32");
    let mut bytes = fs::read(&grad).unwrap();
    bytes[3] ^= 0x40;
    fs::write(&grad, bytes).unwrap();
    assert!(matches!(engine.load(), Err(Error::StateCorrupt(_))));
    assert!(matches!(
        engine.advance(&s.bundles[0], &config(30, 1), None),
        Err(Error::StateCorrupt(_))
    ));
}

#[test]
fn second_engine_is_locked_out() {
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    assert!(matches!(Engine::open(state_dir.path()), Err(Error::StateLocked(_))));
    drop(engine);
    Engine::open(state_dir.path()).unwrap();
}

#[test]
fn lite_mode_caps_pool_and_keeps_tombstones() {
    let mut spec = StreamSpec::uniform(3, 3, 60, 7);
    spec.duplicate_fraction = 0.1;
    let s = stream(&spec);
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    let cfg = EngineConfig {
        pool_budget: Some(250),
        ..config(50, 2)
    };
    let mut removed = 0;
    for b in &s.bundles {
        let out = engine.advance(b, &cfg, None).unwrap();
        assert!(out.pool_size <= 250);
        removed += out.compression.unwrap().removals.len();
    }
    let st = engine.load().unwrap().unwrap();
    assert_eq!(st.pool.len(), 250);
    assert_eq!(state::read_tombstones(&st.dir).unwrap().len(), removed);
    assert_eq!(removed, 3 * 198 - 250);
}

#[test]
fn wide_gradients_are_projected() {
    let mut spec = StreamSpec::uniform(2, 3, 40, 8);
    spec.d_g = 128;
    let s = stream(&spec);
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    let cfg = EngineConfig {
        projection_dim: 32,
        ..config(30, 3)
    };
    engine.advance(&s.bundles[0], &cfg, None).unwrap();
    engine.advance(&s.bundles[1], &cfg, None).unwrap();
    let st = engine.load().unwrap().unwrap();
    assert_eq!(st.pool.d_g(), 32);
    let spec = st.index.projection.unwrap();
    assert_eq!((spec.input_dim, spec.output_dim), (128, 32));
}

#[test]
fn refresh_bundle_replaces_gradients() {
    let s = stream(&StreamSpec::uniform(2, 3, 30, 9));
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    engine.advance(&s.bundles[0], &config(30, 1), None).unwrap();

    let mut fresh = curator_core::read_bundle(&s.bundles[0]).unwrap();
    for r in &mut fresh.records {
        r.gradient_vec.iter_mut().for_each(|g| *g = -*g);
    }
    let fresh_dir = tempfile::tempdir().unwrap();
    curator_core::write_bundle(fresh_dir.path(), &fresh).unwrap();
    engine.advance(&s.bundles[1], &config(30, 1), Some(fresh_dir.path())).unwrap();
    let st = engine.load().unwrap().unwrap();
    let stored = &st.pool.samples()[0];
    assert_eq!(stored.sample_id, fresh.records[0].sample_id);
    assert_eq!(stored.gradient_vec, fresh.records[0].gradient_vec);
    assert_eq!(stored.timestep_added, 0);
}

#[test]
fn standalone_compress_commits_a_version() {
    let s = stream(&StreamSpec::uniform(1, 3, 60, 10));
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    engine.advance(&s.bundles[0], &config(30, 1), None).unwrap();
    let out = engine.compress(100).unwrap();
    assert_eq!(out.version, 2);
    assert_eq!(out.pool_size, 100);
    assert_eq!(engine.load().unwrap().unwrap().pool.len(), 100);
}

#[test]
fn compress_without_pool_is_a_conflict() {
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    assert!(matches!(engine.compress(10), Err(Error::StateConflict(_))));
}

fn table(rows: &[(&str, &[f64])]) -> PerformanceTable {
    PerformanceTable::new(
        rows.iter().map(|r| r.0.to_string()).collect(),
        rows.iter().map(|r| r.1.to_vec()).collect(),
    )
    .unwrap()
}

#[test]
fn report_matches_metrics_and_is_stable() {
    let s = stream(&StreamSpec::uniform(2, 3, 40, 11));
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    for b in &s.bundles {
        engine.advance(b, &config(30, 1), None).unwrap();
    }
    let perf = table(&[("a", &[40.0, 35.0, 50.0]), ("b", &[20.0, 30.0, 10.0])]);
    let first = engine.report(&perf).unwrap();
    let bytes: Vec<Vec<u8>> = first.files.iter().map(|f| fs::read(f).unwrap()).collect();
    let second = engine.report(&perf).unwrap();
    for (f, b) in second.files.iter().zip(&bytes) {
        assert_eq!(&fs::read(f).unwrap(), b, "{}", f.display());
    }

    let json = fs::read_to_string(first.dir.join("metrics.json")).unwrap();
    let m: MetricsReport = serde_json::from_str(&json).unwrap();
    let bounds = per_skill_maxima(&perf);
    assert_eq!(m.forgetting_rate, forgetting_rate(&perf).rate);
    for t in 0..3 {
        assert_eq!(m.average_accuracy[t], average_accuracy(&perf, t).unwrap());
        assert_eq!(m.relative_gain[t], relative_gain(&perf, &bounds, t).unwrap());
    }
    let clusters = fs::read_to_string(first.dir.join("clusters.csv")).unwrap();
    assert!(clusters.lines().count() > 2);
}

#[test]
fn monotone_table_reports_no_forgetting() {
    let s = stream(&StreamSpec::uniform(1, 3, 40, 12));
    let state_dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(state_dir.path()).unwrap();
    engine.advance(&s.bundles[0], &config(30, 1), None).unwrap();
    let perf = table(&[("a", &[10.0, 20.0, 20.0]), ("b", &[5.0, 5.0, 9.0])]);
    let files = engine.report(&perf).unwrap();
    let m: MetricsReport = serde_json::from_str(&fs::read_to_string(files.dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m.forgetting_rate, 0.0);
}
