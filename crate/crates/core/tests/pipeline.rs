use std::path::Path;

use tempfile::TempDir;

use ctforensics::config::PipelineConfig;
use ctforensics::pipeline::{self, run_experiment, RunOptions};
use ctforensics::{ErrorKind, GridSpec};

#[allow(clippy::field_reassign_with_default)]
fn tiny(root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 5;
    cfg.paths.root = root.to_path_buf();
    cfg.grid = GridSpec::new(64, 32, 4);
    cfg.dataset.n_scans = 20;
    cfg.dataset.depth = 12;
    cfg.detector.base_width = 4;
    cfg.detector.dense_units = 8;
    cfg.train.max_epochs = 1;
    cfg.pca.dims = 8;
    cfg.validate().unwrap();
    cfg
}

fn listing(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dry_run_leaves_the_root_empty() {
    let dir = TempDir::new().unwrap();
    let opts = RunOptions {
        dry_run: true,
        force: false,
    };
    let s = run_experiment(&tiny(dir.path()), opts).unwrap();
    assert!(s.slices.total() > 0);
    assert!(listing(dir.path()).is_empty());
}

#[test]
fn reruns_need_force_and_are_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let first = run_experiment(&cfg, RunOptions::default()).unwrap();
    let files = listing(dir.path());
    for f in [
        "reports/summary.txt",
        "reports/metrics.csv",
        "models/global.ctgm",
    ] {
        assert!(files.iter().any(|(n, _)| n == f), "missing {f}");
    }

    let err = run_experiment(&cfg, RunOptions::default()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Io);

    let second = run_experiment(
        &cfg,
        RunOptions {
            dry_run: false,
            force: true,
        },
    )
    .unwrap();
    assert_eq!(first.table, second.table);
    assert_eq!(files, listing(dir.path()));
}

#[test]
fn staged_outputs_reload() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let summary = run_experiment(&cfg, RunOptions::default()).unwrap();
    let ds = pipeline::load_tables(&cfg).unwrap();
    let outcomes = pipeline::read_outcomes(&cfg).unwrap();
    let again = pipeline::evaluate(
        &cfg,
        &ds,
        &outcomes,
        RunOptions {
            dry_run: true,
            force: false,
        },
    )
    .unwrap();
    assert_eq!(summary.table, again.table);
    pipeline::load_detector(&cfg).unwrap();
    pipeline::load_global(&cfg).unwrap();
}

#[test]
fn missing_stages_report_their_kind() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    assert_eq!(
        pipeline::load_tables(&cfg).unwrap_err().kind(),
        ErrorKind::Data
    );
    assert_eq!(
        pipeline::load_detector(&cfg).unwrap_err().kind(),
        ErrorKind::Model
    );
}
