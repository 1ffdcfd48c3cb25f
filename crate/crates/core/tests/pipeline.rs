mod common;

use std::path::Path;

use curate_core::packing::{self, PackItem};
use curate_core::pipeline::{self, Stage};
use curate_core::selection::{self, Strategy};
use curate_core::PipelineConfig;

/// Selected ids of the default configuration on the toy corpus.
const GOLDEN_SELECTION: [u64; 80] = [
    0, 2, 4, 6, 7, 8, 9, 10, 13, 17, 18, 19, 22, 23, 24, 27, 32, 33, 34, 38, 40, 43, 48, 55, 56, 57, 58, 61, 63,
    64, 65, 67, 70, 72, 77, 80, 81, 83, 90, 99, 101, 104, 105, 106, 109, 113, 115, 116, 118, 120, 129, 132, 133,
    134, 136, 141, 144, 146, 149, 150, 151, 155, 157, 160, 161, 166, 170, 172, 178, 179, 183, 185, 186, 190, 191,
    193, 194, 195, 198, 199,
];

const DETERMINISTIC_FILES: [&str; 10] = [
    pipeline::SAMPLES_FILE,
    pipeline::STATS_FILE,
    pipeline::EMBEDDINGS_FILE,
    pipeline::CLUSTERS_FILE,
    pipeline::CENTROIDS_FILE,
    pipeline::SCORES_FILE,
    pipeline::SELECTION_FILE,
    pipeline::MANIFEST_FILE,
    pipeline::REPORT_FILE,
    pipeline::RESOLVED_CONFIG_FILE,
];

fn config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::for_dataset(common::toy_corpus_path());
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn selected_ids(dir: &Path) -> Vec<u64> {
    let (_, records) = selection::load_selection(&dir.join(pipeline::SELECTION_FILE)).unwrap();
    let mut ids: Vec<u64> = records.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    ids
}

#[test]
fn default_run_matches_golden_selection() {
    let dir = tempfile::tempdir().unwrap();
    let report = pipeline::run_pipeline(&config(dir.path())).unwrap();
    assert_eq!(report.dataset_size, 200);
    assert_eq!(report.selected, 80);
    assert_eq!(selected_ids(dir.path()), GOLDEN_SELECTION);
    assert!(!dir.path().join(pipeline::FAILED_MARKER).exists());
    for f in DETERMINISTIC_FILES.iter().chain([&pipeline::METADATA_FILE]) {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let resolved = PipelineConfig::load(&dir.path().join(pipeline::RESOLVED_CONFIG_FILE)).unwrap();
    assert_eq!(resolved.clustering.k, Some(10));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline::run_pipeline(&config(a.path())).unwrap();
    let cfg_b = config(b.path());
    pipeline::run_pipeline(&cfg_b).unwrap();
    for f in DETERMINISTIC_FILES {
        if f == pipeline::RESOLVED_CONFIG_FILE {
            continue;
        }
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn stages_one_at_a_time_match_full_run() {
    let full = tempfile::tempdir().unwrap();
    let staged = tempfile::tempdir().unwrap();
    pipeline::run_pipeline(&config(full.path())).unwrap();
    let cfg = config(staged.path());
    for stage in Stage::ALL {
        pipeline::run_stage(&cfg, stage).unwrap();
    }
    for f in [pipeline::SELECTION_FILE, pipeline::MANIFEST_FILE, pipeline::REPORT_FILE] {
        assert_eq!(
            std::fs::read(full.path().join(f)).unwrap(),
            std::fs::read(staged.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn full_random_selection_is_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.selection.strategy = Strategy::Random;
    cfg.selection.m_percent = 100.0;
    let report = pipeline::run_pipeline(&cfg).unwrap();
    assert_eq!(report.selected, 200);
    assert_eq!(selected_ids(dir.path()), (0..200).collect::<Vec<u64>>());
}

#[test]
fn manifest_agrees_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.packing.max_len = 512;
    cfg.packing.batch_size = 8;
    let report = pipeline::run_pipeline(&cfg).unwrap();
    let plan = packing::load_manifest(&dir.path().join(pipeline::MANIFEST_FILE)).unwrap();
    let samples = pipeline::load_samples(dir.path()).unwrap();
    let chosen: std::collections::HashSet<u64> = selected_ids(dir.path()).into_iter().collect();
    let items: Vec<PackItem> = samples.iter().filter(|s| chosen.contains(&s.id)).map(PackItem::from).collect();
    plan.validate(&items).unwrap();
    let e = packing::plan_efficiency(&plan);
    assert_eq!(report.packing.get(plan.strategy).unwrap(), &e);
    let t = report.packing.get(packing::PackStrategy::Traditional).unwrap();
    let d = report.packing.get(packing::PackStrategy::Dynamic).unwrap();
    assert!(e.padded_total <= d.padded_total && d.padded_total <= t.padded_total);
}

#[test]
fn ifd_filter_shrinks_pool() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    for stage in [Stage::Ingest, Stage::Embed, Stage::Cluster, Stage::Score] {
        pipeline::run_stage(&cfg, stage).unwrap();
    }
    let scores = pipeline::load_scores(&dir.path().join(pipeline::SCORES_FILE)).unwrap();
    let mut ifds: Vec<f64> = scores.values().map(|r| r.ifd).collect();
    ifds.sort_by(f64::total_cmp);
    let limit = ifds[ifds.len() / 2];
    let kept = ifds.iter().filter(|&&v| v <= limit).count();

    cfg.scoring.drop_ifd_above = Some(limit);
    let report = pipeline::run_pipeline(&cfg).unwrap();
    assert_eq!(report.pool_size, kept);
    assert_eq!(report.selected, (0.4 * kept as f64).ceil() as usize);
    let (_, records) = selection::load_selection(&dir.path().join(pipeline::SELECTION_FILE)).unwrap();
    assert!(records.iter().all(|r| r.ifd <= limit));
}

#[test]
fn missing_dataset_fails_at_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.dataset_path = dir.path().join("nope.jsonl");
    let err = pipeline::run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Ingest);
    assert_eq!(err.exit_code(), 2);
    let marker = std::fs::read_to_string(dir.path().join(pipeline::FAILED_MARKER)).unwrap();
    assert!(marker.contains("nope.jsonl"));

    cfg.dataset_path = common::toy_corpus_path();
    pipeline::run_pipeline(&cfg).unwrap();
    assert!(!dir.path().join(pipeline::FAILED_MARKER).exists());
}

#[test]
fn tampered_scores_are_an_invariant_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    pipeline::run_pipeline(&cfg).unwrap();
    let path = dir.path().join(pipeline::SCORES_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let first = lines.iter_mut().find(|v| v.get("ifd").is_some()).unwrap();
    let ifd = first["ifd"].as_f64().unwrap();
    first["ifd"] = serde_json::json!(ifd * 1.5);
    let body: String = lines.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(&path, body).unwrap();
    let err = pipeline::run_stage(&cfg, Stage::Select).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn sweep_nests_and_writes_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let summary = pipeline::sweep_m(&config(dir.path()), &[30.0, 10.0, 20.0, 20.0]).unwrap();
    assert!(summary.nesting_violations.is_empty());
    let ms: Vec<f64> = summary.entries.iter().map(|e| e.m_percent).collect();
    assert_eq!(ms, [10.0, 20.0, 30.0]);
    let sizes: Vec<usize> = summary.entries.iter().map(|e| e.selected).collect();
    assert_eq!(sizes, [20, 40, 60]);
    for e in &summary.entries {
        assert!(e.dir.join(pipeline::MANIFEST_FILE).is_file());
        assert_eq!(e.dir, dir.path().join(pipeline::sweep_dir_name(e.m_percent)));
    }
    assert!(dir.path().join(pipeline::SWEEP_FILE).is_file());
}
