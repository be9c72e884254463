//! End-to-end stages shared by the command-line tool and the tests. Every
//! stage reads its inputs from, and writes its outputs under, the directories
//! of [`PathsConfig`](crate::config::PathsConfig). With `dry_run` nothing is
//! written; without `force` existing outputs are never overwritten.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{
    fit_pca, fit_svm, predict_global, write_search_report, GlobalModel, Matrix, SearchRow,
};
use crate::config::PipelineConfig;
use crate::detector::{self, Detector, DetectorParams, PatchSet, TrainOutcome};
use crate::error::{Error, Result};
use crate::evaluation::{
    area_verdict, associate_area, chebyshev, format_summary, real_area_false_positive,
    scan_verdict, slice_metrics, write_metrics_csv, write_predictions, AreaOutcome, MetricsReport,
    ReportRow, SlicePrediction,
};
use crate::forge::{build_dataset as forge_dataset, slice_truth, Dataset, ScanEntry};
use crate::glcm::feature_vector;
use crate::grid::{extract_patch, full_grid, GridSpec, Split};
use crate::heatmap::{assemble, nearest_cell, Heatmap};
use crate::volume::{
    load_scan, normalize_slice, read_raw, NormalizationSpec, Plane, ScanFormat, ScanVolume,
};
use crate::Label;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub dry_run: bool,
    pub force: bool,
}

fn guard(path: &Path, opts: RunOptions) -> Result<()> {
    if path.exists() && !opts.force && !opts.dry_run {
        return Err(Error::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildSummary {
    pub scans: usize,
    pub tampered: usize,
    pub manifest_rows: usize,
    pub scans_per_split: BTreeMap<Split, usize>,
}

/// Generates the synthetic dataset into the dataset directory.
pub fn build_dataset(cfg: &PipelineConfig, opts: RunOptions) -> Result<(BuildSummary, Dataset)> {
    let dir = cfg.paths.dataset_dir();
    guard(&dir.join("manifest.csv"), opts)?;
    let ds = forge_dataset(&cfg.dataset_spec(), &cfg.grid, &cfg.sampler, cfg.seed)?;
    let mut per_split = BTreeMap::new();
    for s in &ds.scans {
        *per_split.entry(s.split).or_insert(0) += 1;
    }
    let summary = BuildSummary {
        scans: ds.scans.len(),
        tampered: ds.scans.iter().filter(|s| s.tampered).count(),
        manifest_rows: ds.manifest.len(),
        scans_per_split: per_split,
    };
    if !opts.dry_run {
        ds.write(&dir)?;
    }
    Ok((summary, ds))
}

/// Loads scans by id from the dataset's volume directory, caching them.
pub struct VolumeStore {
    dir: PathBuf,
    cache: BTreeMap<String, ScanVolume>,
}

impl VolumeStore {
    pub fn new(dataset_dir: &Path) -> Self {
        Self {
            dir: dataset_dir.join("volumes"),
            cache: BTreeMap::new(),
        }
    }

    /// Uses volumes already in memory instead of reading them back.
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            dir: PathBuf::new(),
            cache: ds.volumes.clone(),
        }
    }

    pub fn get(&mut self, scan_id: &str) -> Result<&ScanVolume> {
        if !self.cache.contains_key(scan_id) {
            let v = read_raw(&self.dir.join(format!("{scan_id}.raw")))?;
            self.cache.insert(scan_id.to_string(), v);
        }
        Ok(&self.cache[scan_id])
    }
}

/// Patches of one split, in manifest order.
pub fn patch_set(
    ds: &Dataset,
    store: &mut VolumeStore,
    split: Split,
    grid: &GridSpec,
    norm: &NormalizationSpec,
) -> Result<PatchSet> {
    let mut set = PatchSet::new(grid.img_size);
    let mut current: Option<((String, usize), Plane)> = None;
    for r in ds.manifest.iter().filter(|r| r.split == split) {
        let key = (r.scan_id.clone(), r.slice_index);
        if current.as_ref().is_none_or(|(k, _)| *k != key) {
            let vol = store.get(&r.scan_id)?;
            let slice = vol.slice(r.slice_index).ok_or_else(|| {
                Error::Data(format!("{} has no slice {}", r.scan_id, r.slice_index))
            })?;
            current = Some((key, normalize_slice(slice, norm)?));
        }
        let plane = &current.as_ref().unwrap().1;
        set.push(
            &extract_patch(plane, (r.x, r.y), grid.img_size)?.values,
            r.label,
        )?;
    }
    Ok(set)
}

pub fn load_tables(cfg: &PipelineConfig) -> Result<Dataset> {
    let dir = cfg.paths.dataset_dir();
    if !dir.join("manifest.csv").exists() {
        return Err(Error::Data(format!(
            "no dataset at {}; run build-dataset first",
            dir.display()
        )));
    }
    Dataset::read_tables(&dir)
}

/// Trains the patch detector on the local training split and validates on
/// the local validation split. Returns `None` on a dry run.
pub fn train_local(
    cfg: &PipelineConfig,
    ds: &Dataset,
    store: &mut VolumeStore,
    opts: RunOptions,
) -> Result<Option<TrainOutcome>> {
    let ckpt = cfg.paths.checkpoint();
    guard(&ckpt, opts)?;
    let train = patch_set(ds, store, Split::TrainLocal, &cfg.grid, &cfg.normalization)?;
    let val = patch_set(ds, store, Split::ValLocal, &cfg.grid, &cfg.normalization)?;
    if opts.dry_run {
        log::info!(
            "would train on {} patches, validate on {}",
            train.len(),
            val.len()
        );
        return Ok(None);
    }
    let train_cfg = detector::TrainConfig {
        seed: cfg.seed,
        ..cfg.train
    };
    let outcome = detector::train(cfg.detector, &train, &val, &train_cfg)?;
    create_dir(&cfg.paths.models_dir())?;
    outcome.params.save(&ckpt)?;
    detector::write_training_log(
        create(&cfg.paths.reports_dir().join("train_log.csv"))?,
        &outcome.log,
    )?;
    Ok(Some(outcome))
}

pub fn load_detector(cfg: &PipelineConfig) -> Result<Detector> {
    let p = cfg.paths.checkpoint();
    if !p.exists() {
        return Err(Error::Model(format!("missing checkpoint {}", p.display())));
    }
    Detector::from_params(&DetectorParams::load(&p)?)
}

/// One heatmap per slice, in slice order.
pub fn detect_volume(
    net: &Detector,
    vol: &ScanVolume,
    grid: &GridSpec,
    norm: &NormalizationSpec,
) -> Result<Vec<Heatmap>> {
    if vol.height() != grid.ct_size || vol.width() != grid.ct_size {
        return Err(Error::Geometry(format!(
            "{} is {}x{}, grid expects {}",
            vol.scan_id(),
            vol.height(),
            vol.width(),
            grid.ct_size
        )));
    }
    let centers: Vec<(usize, usize)> = full_grid(grid).iter().collect();
    let mut out = Vec::with_capacity(vol.depth());
    for slice in vol.slices() {
        let plane = normalize_slice(slice, norm)?;
        let mut values = Vec::with_capacity(centers.len() * grid.img_size * grid.img_size);
        for &c in &centers {
            values.extend(extract_patch(&plane, c, grid.img_size)?.values);
        }
        let probs = net.predict_proba(&values)?;
        let results: Vec<_> = centers.iter().copied().zip(probs).collect();
        out.push(assemble(&results, grid)?);
    }
    Ok(out)
}

fn heatmap_path(dir: &Path, scan_id: &str, z: usize) -> PathBuf {
    dir.join(scan_id).join(format!("slice_{z:04}.hmap"))
}

pub fn write_heatmaps(dir: &Path, scan_id: &str, maps: &[Heatmap], pgm: bool) -> Result<()> {
    create_dir(&dir.join(scan_id))?;
    for (z, m) in maps.iter().enumerate() {
        let p = heatmap_path(dir, scan_id, z);
        m.write_to(create(&p)?)?;
        if pgm {
            m.write_pgm(create(&p.with_extension("pgm"))?, 4)?;
        }
    }
    Ok(())
}

pub fn read_heatmaps(dir: &Path, scan_id: &str) -> Result<Vec<Heatmap>> {
    let mut out = Vec::new();
    loop {
        let p = heatmap_path(dir, scan_id, out.len());
        if !p.exists() {
            break;
        }
        out.push(Heatmap::read_from(open(&p)?)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "no heatmaps for {scan_id} under {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Released scans (the forged copy for tampered scans) of the given splits.
pub fn released_scans<'a>(
    ds: &'a Dataset,
    splits: &'a [Split],
) -> impl Iterator<Item = &'a ScanEntry> + 'a {
    ds.scans.iter().filter(move |s| splits.contains(&s.split))
}

/// Heatmaps of every released scan in `splits`, keyed by scan id.
pub fn detect_dataset(
    cfg: &PipelineConfig,
    net: &Detector,
    ds: &Dataset,
    store: &mut VolumeStore,
    splits: &[Split],
    opts: RunOptions,
) -> Result<BTreeMap<String, Vec<Heatmap>>> {
    let dir = cfg.paths.heatmaps_dir();
    let mut out = BTreeMap::new();
    for s in released_scans(ds, splits) {
        guard(&dir.join(&s.scan_id), opts)?;
        let maps = detect_volume(net, store.get(&s.scan_id)?, &cfg.grid, &cfg.normalization)?;
        if !opts.dry_run {
            write_heatmaps(&dir, &s.scan_id, &maps, false)?;
        }
        out.insert(s.scan_id.clone(), maps);
    }
    Ok(out)
}

/// Reads stored heatmaps of every released scan in `splits`.
pub fn load_heatmaps(
    cfg: &PipelineConfig,
    ds: &Dataset,
    splits: &[Split],
) -> Result<BTreeMap<String, Vec<Heatmap>>> {
    let dir = cfg.paths.heatmaps_dir();
    released_scans(ds, splits)
        .map(|s| Ok((s.scan_id.clone(), read_heatmaps(&dir, &s.scan_id)?)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct GlobalSummary {
    pub model: GlobalModel,
    pub rows: usize,
    pub search: Vec<SearchRow>,
    pub best: SearchRow,
}

/// Fits PCA and the SVM on every slice heatmap of the global training scans.
pub fn train_global(
    cfg: &PipelineConfig,
    ds: &Dataset,
    heatmaps: &BTreeMap<String, Vec<Heatmap>>,
    opts: RunOptions,
) -> Result<GlobalSummary> {
    let bundle = cfg.paths.bundle();
    guard(&bundle, opts)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for s in released_scans(ds, &[Split::TrainGlobal]) {
        let maps = heatmaps
            .get(&s.scan_id)
            .ok_or_else(|| Error::Data(format!("no heatmaps for {}", s.scan_id)))?;
        let tamper = ds.tamper_of(&s.scan_id);
        for (z, m) in maps.iter().enumerate() {
            rows.push(feature_vector(m, &cfg.glcm)?.to_f64());
            labels.push(slice_truth(tamper, z));
        }
    }
    let x = Matrix::from_rows(&rows)?;
    drop(rows);
    let pca = fit_pca(&x, cfg.pca.dims)?;
    let z = pca.transform_rows(&x)?;
    let (svm, report) = fit_svm(&z, &labels, &cfg.search, cfg.seed)?;
    let model = GlobalModel::new(cfg.glcm.clone(), pca, svm)?;
    if !opts.dry_run {
        create_dir(&cfg.paths.models_dir())?;
        model.save(&bundle)?;
        write_search_report(
            create(&cfg.paths.reports_dir().join("grid_search.csv"))?,
            &report,
        )?;
    }
    Ok(GlobalSummary {
        model,
        rows: labels.len(),
        best: report.best_row().clone(),
        search: report.rows,
    })
}

pub fn load_global(cfg: &PipelineConfig) -> Result<GlobalModel> {
    let p = cfg.paths.bundle();
    if !p.exists() {
        return Err(Error::Model(format!(
            "missing model bundle {}",
            p.display()
        )));
    }
    GlobalModel::load(&p)
}

/// Per-slice decision plus the heatmap peak used for localization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceOutcome {
    pub scan_id: String,
    pub slice_index: usize,
    pub label_pred: Label,
    pub score: f64,
    pub peak_gx: Option<usize>,
    pub peak_gy: Option<usize>,
}

impl SliceOutcome {
    pub fn peak(&self) -> Option<(usize, usize)> {
        self.peak_gx.zip(self.peak_gy)
    }

    pub fn prediction(&self) -> SlicePrediction {
        SlicePrediction {
            scan_id: self.scan_id.clone(),
            slice_index: self.slice_index,
            label_pred: self.label_pred,
            score: self.score,
            ground_truth: None,
            tamper_area_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanOutcome {
    pub scan_id: String,
    pub tampered: bool,
    pub positive_slices: usize,
    pub slices: usize,
}

pub fn classify_heatmaps(
    model: &GlobalModel,
    scan_id: &str,
    maps: &[Heatmap],
    rule: (usize, usize),
) -> Result<(Vec<SliceOutcome>, ScanOutcome)> {
    let mut slices = Vec::with_capacity(maps.len());
    for (z, m) in maps.iter().enumerate() {
        let (label, score) = predict_global(model, m)?;
        let peak = m.peak_cell();
        slices.push(SliceOutcome {
            scan_id: scan_id.to_string(),
            slice_index: z,
            label_pred: label,
            score,
            peak_gx: peak.map(|p| p.0),
            peak_gy: peak.map(|p| p.1),
        });
    }
    let flags: Vec<bool> = slices.iter().map(|s| s.label_pred.is_fake()).collect();
    let tampered = scan_verdict(&flags, rule.0, rule.1)?;
    let scan = ScanOutcome {
        scan_id: scan_id.to_string(),
        tampered,
        positive_slices: flags.iter().filter(|&&f| f).count(),
        slices: flags.len(),
    };
    Ok((slices, scan))
}

/// Classifies a scan file from scratch: detection, features, SVM, verdict.
pub fn classify_scan(
    cfg: &PipelineConfig,
    path: &Path,
    format: ScanFormat,
) -> Result<(Vec<SliceOutcome>, ScanOutcome)> {
    let net = load_detector(cfg)?;
    let model = load_global(cfg)?;
    let vol = load_scan(path, format)?;
    let maps = detect_volume(&net, &vol, &cfg.grid, &cfg.normalization)?;
    classify_heatmaps(
        &model,
        vol.scan_id(),
        &maps,
        (cfg.scan_rule.n, cfg.scan_rule.m),
    )
}

pub fn write_slice_outcomes(path: &Path, rows: &[SliceOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_slice_outcomes(path: &Path) -> Result<Vec<SliceOutcome>> {
    csv::Reader::from_reader(open(path)?)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Classifies every test scan from stored or supplied heatmaps and writes
/// `predictions.csv` and `scan_verdicts.csv`.
pub fn classify_split(
    cfg: &PipelineConfig,
    model: &GlobalModel,
    ds: &Dataset,
    heatmaps: &BTreeMap<String, Vec<Heatmap>>,
    split: Split,
    opts: RunOptions,
) -> Result<(Vec<SliceOutcome>, Vec<ScanOutcome>)> {
    let reports = cfg.paths.reports_dir();
    guard(&reports.join("predictions.csv"), opts)?;
    let (mut slices, mut scans) = (Vec::new(), Vec::new());
    for s in released_scans(ds, &[split]) {
        let maps = heatmaps
            .get(&s.scan_id)
            .ok_or_else(|| Error::Data(format!("no heatmaps for {}", s.scan_id)))?;
        let (sl, sc) =
            classify_heatmaps(model, &s.scan_id, maps, (cfg.scan_rule.n, cfg.scan_rule.m))?;
        slices.extend(sl);
        scans.push(sc);
    }
    if !opts.dry_run {
        write_slice_outcomes(&reports.join("predictions.csv"), &slices)?;
        let mut w = csv::Writer::from_writer(create(&reports.join("scan_verdicts.csv"))?);
        for s in &scans {
            w.serialize(s)?;
        }
        w.flush()
            .map_err(|e| Error::io(reports.join("scan_verdicts.csv"), e))?;
    }
    Ok((slices, scans))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSummary {
    pub slices: MetricsReport,
    pub scans: MetricsReport,
    pub areas: MetricsReport,
    /// Detected tampered slices whose heatmap peak lies within Chebyshev
    /// distance 2 of the true center, and the number of detected tampered slices.
    pub localized: (usize, usize),
    pub table: String,
}

impl EvaluationSummary {
    pub fn localization_rate(&self) -> Option<f64> {
        (self.localized.1 > 0).then(|| self.localized.0 as f64 / self.localized.1 as f64)
    }
}

/// Scores predictions against the dataset's ground truth at slice, area and
/// scan level.
pub fn evaluate(
    cfg: &PipelineConfig,
    ds: &Dataset,
    outcomes: &[SliceOutcome],
    opts: RunOptions,
) -> Result<EvaluationSummary> {
    let reports = cfg.paths.reports_dir();
    guard(&reports.join("metrics.csv"), opts)?;
    let known: BTreeMap<&str, &ScanEntry> =
        ds.scans.iter().map(|s| (s.scan_id.as_str(), s)).collect();
    let mut per_scan: BTreeMap<&str, Vec<&SliceOutcome>> = BTreeMap::new();
    for o in outcomes {
        let id = o.scan_id.as_str();
        if !known.contains_key(id) {
            return Err(Error::Data(format!("prediction for unknown scan {id}")));
        }
        per_scan.entry(id).or_default().push(o);
    }
    let mut labeled = Vec::with_capacity(outcomes.len());
    let (mut s_tp, mut s_tn, mut s_fp, mut s_fn) = (0, 0, 0, 0);
    let (mut a_tp, mut a_tn, mut a_fp, mut a_fn) = (0, 0, 0, 0);
    let mut localized = (0, 0);
    for (id, rows) in &per_scan {
        let mut rows = rows.clone();
        rows.sort_by_key(|r| r.slice_index);
        let seen: BTreeSet<usize> = rows.iter().map(|r| r.slice_index).collect();
        if seen.len() != rows.len() || rows.last().map(|r| r.slice_index + 1) != Some(rows.len()) {
            return Err(Error::Data(format!(
                "predictions for {id} do not cover its slices exactly once"
            )));
        }
        let tamper = ds.tamper_of(id);
        let flags: Vec<bool> = rows.iter().map(|r| r.label_pred.is_fake()).collect();
        for r in &rows {
            let mut p = r.prediction();
            p.ground_truth = Some(slice_truth(tamper, p.slice_index));
            p.tamper_area_id = tamper
                .filter(|t| t.contains_slice(p.slice_index))
                .map(|t| format!("{}@{}", t.scan_id, t.slice_index));
            labeled.push(p);
        }
        let verdict = scan_verdict(&flags, cfg.scan_rule.n, cfg.scan_rule.m)?;
        match (verdict, tamper.is_some()) {
            (true, true) => s_tp += 1,
            (false, false) => s_tn += 1,
            (true, false) => s_fp += 1,
            (false, true) => s_fn += 1,
        }
        match tamper {
            Some(t) => {
                let anchor = nearest_cell((t.x, t.y), &cfg.grid);
                let peaks: Vec<Option<(usize, usize)>> = rows.iter().map(|r| r.peak()).collect();
                for z in (0..rows.len()).filter(|&z| t.contains_slice(z) && flags[z]) {
                    localized.1 += 1;
                    if peaks[z].is_some_and(|p| chebyshev(p, anchor) <= 2) {
                        localized.0 += 1;
                    }
                }
                let assoc = associate_area(&flags, &peaks, t.slice_index, anchor, 2)?;
                match area_verdict(&assoc, t.slice_index, &cfg.area)? {
                    AreaOutcome::TruePositive => a_tp += 1,
                    AreaOutcome::FalseNegative => a_fn += 1,
                }
            }
            None => {
                let fp = real_area_false_positive(&flags, &cfg.area);
                a_fp += fp;
                if fp == 0 {
                    a_tn += 1;
                }
            }
        }
    }
    let slices = slice_metrics(&labeled)?;
    let scans = MetricsReport::from_counts(s_tp, s_tn, s_fp, s_fn);
    let areas = MetricsReport::from_counts(a_tp, a_tn, a_fp, a_fn);
    let table_rows = vec![
        ReportRow {
            test_set: "slices".into(),
            method: "2D".into(),
            metrics: slices,
        },
        ReportRow {
            test_set: "areas".into(),
            method: "3D".into(),
            metrics: areas,
        },
        ReportRow {
            test_set: "scans".into(),
            method: "n-of-m".into(),
            metrics: scans,
        },
    ];
    let table = format_summary(&table_rows);
    if !opts.dry_run {
        write_metrics_csv(create(&reports.join("metrics.csv"))?, &table_rows)?;
        fs::write(reports.join("summary.txt"), &table)
            .map_err(|e| Error::io(reports.join("summary.txt"), e))?;
        write_predictions(create(&reports.join("labeled_predictions.csv"))?, &labeled)?;
    }
    Ok(EvaluationSummary {
        slices,
        scans,
        areas,
        localized,
        table,
    })
}

/// Reads `predictions.csv` written by [`classify_split`].
pub fn read_outcomes(cfg: &PipelineConfig) -> Result<Vec<SliceOutcome>> {
    let p = cfg.paths.reports_dir().join("predictions.csv");
    if !p.exists() {
        return Err(Error::Data(format!(
            "no predictions at {}; run classify first",
            p.display()
        )));
    }
    read_slice_outcomes(&p)
}

/// Every stage in order on a freshly built dataset, keeping volumes and
/// heatmaps in memory between stages.
pub fn run_experiment(cfg: &PipelineConfig, opts: RunOptions) -> Result<EvaluationSummary> {
    let (summary, ds) = build_dataset(cfg, opts)?;
    log::info!(
        "dataset: {} scans, {} patches",
        summary.scans,
        summary.manifest_rows
    );
    let mut store = VolumeStore::from_dataset(&ds);
    let net = match train_local(cfg, &ds, &mut store, opts)? {
        Some(outcome) => Detector::from_params(&outcome.params)?,
        None => Detector::new(cfg.detector, cfg.seed)?,
    };
    let maps = detect_dataset(
        cfg,
        &net,
        &ds,
        &mut store,
        &[Split::TrainGlobal, Split::Test],
        opts,
    )?;
    let global = train_global(cfg, &ds, &maps, opts)?;
    log::info!(
        "global model: {} rows, best cv accuracy {:.4}",
        global.rows,
        global.best.cv_accuracy
    );
    let (slices, _) = classify_split(cfg, &global.model, &ds, &maps, Split::Test, opts)?;
    evaluate(cfg, &ds, &slices, opts)
}
