//! Operator commands behind the `gliomaseg` binary. Each command is a
//! function of the resolved [`RunConfig`] and its explicit arguments, writes
//! under the run's output directory and echoes the effective config there.
//!
//! Per-case work runs on `workers` threads; results are merged in case-id
//! order, so outputs do not depend on the worker count.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::config_hash;
use crate::config::RunConfig;
use crate::data::{
    case_file, list_cases, load_case_with, load_segmentation, read_clinical_csv, read_volume,
    save_segmentation, write_case, CaseBundle, ClinicalTable, Modality, SURVIVAL_CSV,
};
use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::phantoms::{make_phantom_set, write_dataset, PhantomSpec};
use crate::preprocess::preprocess_case;
use crate::report::{
    evaluate_case, format_summary, summarize, write_comparison_overlay, write_rows, CaseMetricsRow,
    SummaryRow,
};
use crate::survival::{
    cache_features, classify_survival, evaluate_survival, plane_bottlenecks, train_survival_joint,
    write_feature_cache, BottleneckSample, SurvivalClass, SurvivalMetrics, SurvivalModel,
    SurvivalReport,
};
use crate::training::{
    train_plane, SegCheckpoint, TrainOptions, TrainOutcome, CHECKPOINT_DIR, TRAIN_LOG,
};
use crate::triplanar::{segment_case, Plane};

pub const STAMP_SUFFIX: &str = "stamp.json";
pub const FEATURE_CACHE: &str = "features.csv";
pub const SURVIVAL_REPORT: &str = "report.json";
pub const SURVIVAL_PREDICTIONS: &str = "survival_predictions.csv";
pub const SURVIVAL_METRICS: &str = "survival_metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

/// Runs `f` for every id on `workers` threads, keeping input order.
pub fn run_per_case<T, F>(workers: usize, ids: &[String], f: F) -> Result<Vec<(String, Result<T>)>>
where
    T: Send,
    F: Fn(&str) -> Result<T> + Sync,
{
    if workers <= 1 {
        return Ok(ids.iter().map(|id| (id.clone(), f(id))).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(|| ids.par_iter().map(|id| (id.clone(), f(id))).collect()))
}

/// Unwraps per-case results, or names every failed case.
pub fn all_succeeded<T>(results: Vec<(String, Result<T>)>) -> Result<Vec<(String, T)>> {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(v) => ok.push((id, v)),
            Err(e) => failed.push(format!("{id}: {e}")),
        }
    }
    if failed.is_empty() {
        Ok(ok)
    } else {
        Err(Error::CaseFailures {
            failed: failed.len(),
            total,
            details: failed.join("; "),
        })
    }
}

/// `requested` (validated against `available`) or everything available.
pub fn select_cases(available: Vec<String>, requested: &[String]) -> Result<Vec<String>> {
    if requested.is_empty() {
        return Ok(available);
    }
    let have: BTreeSet<&String> = available.iter().collect();
    let missing: Vec<&String> = requested.iter().filter(|id| !have.contains(id)).collect();
    if !missing.is_empty() {
        return Err(Error::InvalidInput(format!(
            "unknown case ids: {missing:?}"
        )));
    }
    let set: BTreeSet<String> = requested.iter().cloned().collect();
    Ok(set.into_iter().collect())
}

fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if std::fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(false);
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(true)
}

fn echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_if_changed(
        &dir.join(crate::config::EFFECTIVE_CONFIG),
        cfg.to_toml()?.as_bytes(),
    )
    .map(|_| ())
}

fn read_table(root: &Path) -> Result<Option<ClinicalTable>> {
    let csv = root.join(SURVIVAL_CSV);
    csv.is_file().then(|| read_clinical_csv(&csv)).transpose()
}

/// Fingerprint of a raw case: preprocessing config plus size and mtime of
/// every input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PreprocessStamp {
    config_hash: String,
    inputs: Vec<(String, u64, u64, u32)>,
}

fn stamp_for(raw: &Path, id: &str, hash: &str) -> Result<PreprocessStamp> {
    let dir = raw.join(id);
    let mut inputs = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let meta = entry.metadata().map_err(|e| Error::io(entry.path(), e))?;
        if !meta.is_file() {
            continue;
        }
        let t = meta
            .modified()
            .ok()
            .and_then(|m| m.duration_since(UNIX_EPOCH).ok())
            .unwrap_or_default();
        inputs.push((
            entry.file_name().to_string_lossy().into_owned(),
            meta.len(),
            t.as_secs(),
            t.subsec_nanos(),
        ));
    }
    inputs.sort();
    Ok(PreprocessStamp {
        config_hash: hash.to_string(),
        inputs,
    })
}

fn stamp_path(root: &Path, id: &str) -> PathBuf {
    root.join(id).join(format!("{id}_{STAMP_SUFFIX}"))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessOutcome {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
}

/// Preprocesses raw cases into `<output>/preprocessed`, skipping cases whose
/// inputs and preprocessing config are unchanged since the last run.
pub fn cmd_preprocess(cfg: &RunConfig, ids: &[String]) -> Result<PreprocessOutcome> {
    let raw = &cfg.data_root;
    if !raw.is_dir() {
        return Err(Error::InsufficientData(format!(
            "data root {} does not exist",
            raw.display()
        )));
    }
    let out = cfg.layout().preprocessed();
    let ids = select_cases(list_cases(raw)?, ids)?;
    if ids.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no cases under {}",
            raw.display()
        )));
    }
    echo(cfg, &out)?;
    let csv = raw.join(SURVIVAL_CSV);
    if csv.is_file() {
        let bytes = std::fs::read(&csv).map_err(|e| Error::io(&csv, e))?;
        write_if_changed(&out.join(SURVIVAL_CSV), &bytes)?;
    }
    let table = read_table(raw)?;
    let hash = config_hash(&cfg.preprocess)?;
    let results = run_per_case(cfg.workers, &ids, |id| {
        let stamp = stamp_for(raw, id, &hash)?;
        let sp = stamp_path(&out, id);
        let current = std::fs::read(&sp)
            .ok()
            .and_then(|b| serde_json::from_slice::<PreprocessStamp>(&b).ok());
        if current.as_ref() == Some(&stamp) {
            return Ok(false);
        }
        let case = load_case_with(raw, id, table.as_ref())?;
        write_case(&out, &preprocess_case(&case, &cfg.preprocess)?)?;
        std::fs::write(&sp, serde_json::to_vec_pretty(&stamp)?).map_err(|e| Error::io(&sp, e))?;
        Ok(true)
    })?;
    let mut outcome = PreprocessOutcome::default();
    for (id, written) in all_succeeded(results)? {
        if written {
            outcome.written.push(id);
        } else {
            outcome.skipped.push(id);
        }
    }
    Ok(outcome)
}

/// Preprocessed case ids (all, or the validated `ids`).
pub fn preprocessed_ids(cfg: &RunConfig, ids: &[String]) -> Result<Vec<String>> {
    let dir = cfg.layout().preprocessed();
    if !dir.is_dir() {
        return Err(Error::InsufficientData(format!(
            "no preprocessed data at {}; run preprocess first",
            dir.display()
        )));
    }
    let ids = select_cases(list_cases(&dir)?, ids)?;
    if ids.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no preprocessed cases in {}",
            dir.display()
        )));
    }
    Ok(ids)
}

pub fn load_preprocessed(cfg: &RunConfig, ids: &[String]) -> Result<Vec<CaseBundle>> {
    let dir = cfg.layout().preprocessed();
    let ids = preprocessed_ids(cfg, ids)?;
    let table = read_table(&dir)?;
    let loaded = run_per_case(cfg.workers, &ids, |id| {
        load_case_with(&dir, id, table.as_ref())
    })?;
    Ok(all_succeeded(loaded)?.into_iter().map(|(_, c)| c).collect())
}

/// Trains one planar model on every labelled preprocessed case. With
/// `resume`, continues from the plane's existing checkpoint when present.
pub fn cmd_train_seg(
    cfg: &RunConfig,
    plane: Plane,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let cases: Vec<CaseBundle> = load_preprocessed(cfg, &[])?
        .into_iter()
        .filter(|c| c.labels.is_some())
        .collect();
    if cases.is_empty() {
        return Err(Error::InsufficientData(
            "no labelled preprocessed cases".into(),
        ));
    }
    let dir = cfg.layout().plane_model(plane);
    echo(cfg, &dir)?;
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    let resume = if resume && ckpt_dir.is_dir() {
        Some(SegCheckpoint::load(&ckpt_dir)?)
    } else {
        let log = dir.join(TRAIN_LOG);
        if log.exists() {
            std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
        None
    };
    train_plane(
        &cases,
        &cfg.seg_config(plane),
        &cfg.network,
        TrainOptions {
            out_dir: Some(dir),
            resume,
            stop_after,
        },
    )
}

/// Trained planar models in the order requested.
pub fn load_plane_models(cfg: &RunConfig, planes: &[Plane]) -> Result<Vec<(Plane, NetworkParams)>> {
    planes
        .iter()
        .map(|&p| {
            let dir = cfg.layout().plane_model(p).join(CHECKPOINT_DIR);
            SegCheckpoint::load(&dir)
                .map(|c| (p, c.params))
                .map_err(|e| match e {
                    Error::MissingModel(m) => Error::MissingModel(format!("{p} model: {m}")),
                    other => other,
                })
        })
        .collect()
}

/// Segments preprocessed cases with the configured planes and writes
/// BraTS-convention label files in the original (uncropped) geometry.
pub fn cmd_infer(cfg: &RunConfig, ids: &[String]) -> Result<Vec<PathBuf>> {
    let models = load_plane_models(cfg, &cfg.inference.planes)?;
    let refs: Vec<(Plane, &NetworkParams)> = models.iter().map(|(p, m)| (*p, m)).collect();
    let pre = cfg.layout().preprocessed();
    let ids = preprocessed_ids(cfg, ids)?;
    let out = cfg.layout().predictions();
    echo(cfg, &out)?;
    let results = run_per_case(cfg.workers, &ids, |id| {
        let case = load_case_with(&pre, id, None)?;
        let labels = segment_case(&case, &refs, cfg.inference.fusion, cfg.inference.batch)?;
        let reference = raw_header(cfg, id);
        save_segmentation(id, &labels, &out, reference.as_ref())
    })?;
    Ok(all_succeeded(results)?
        .into_iter()
        .map(|(_, p)| p)
        .collect())
}

/// Header of the raw FLAIR volume, when the raw case is still reachable.
fn raw_header(cfg: &RunConfig, id: &str) -> Option<nifti::NiftiHeader> {
    let path = case_file(&cfg.data_root, id, Modality::Flair.suffix());
    read_volume(&path).ok().map(|(_, h)| h)
}

/// Segmentation files in `dir`: `<id>.nii.gz` or `<id>/<id>_seg.nii.gz`.
pub fn find_segmentations(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if path.is_file() {
            if let Some(id) = name
                .strip_suffix(".nii.gz")
                .or_else(|| name.strip_suffix(".nii"))
            {
                found.push((id.to_string(), path));
            }
        } else if path.is_dir() {
            let seg = case_file(dir, &name, "seg");
            if seg.is_file() {
                found.push((name, seg));
            }
        }
    }
    found.sort();
    Ok(found)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationOutcome {
    pub rows: Vec<CaseMetricsRow>,
    pub summary: Vec<SummaryRow>,
    pub overlays: Vec<PathBuf>,
}

/// Scores predictions against ground truth and writes per-case metrics, the
/// WT/TC/ET summary and, for each requested plane, one FLAIR overlay per
/// case (ground truth left, prediction right).
pub fn cmd_evaluate(
    cfg: &RunConfig,
    pred_dir: &Path,
    gt_dir: &Path,
    overlay_planes: &[Plane],
) -> Result<EvaluationOutcome> {
    let preds = find_segmentations(pred_dir)?;
    let gts = find_segmentations(gt_dir)?;
    let p_ids: BTreeSet<&String> = preds.iter().map(|(id, _)| id).collect();
    let g_ids: BTreeSet<&String> = gts.iter().map(|(id, _)| id).collect();
    if p_ids != g_ids {
        let only_p: Vec<_> = p_ids.difference(&g_ids).collect();
        let only_g: Vec<_> = g_ids.difference(&p_ids).collect();
        return Err(Error::InvalidInput(format!(
            "case sets differ; only in predictions: {only_p:?}; only in ground truth: {only_g:?}"
        )));
    }
    if preds.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no segmentations in {}",
            pred_dir.display()
        )));
    }
    let out = cfg.layout().evaluation();
    echo(cfg, &out)?;
    let ids: Vec<String> = preds.iter().map(|(id, _)| id.clone()).collect();
    let results = run_per_case(cfg.workers, &ids, |id| {
        let find = |v: &[(String, PathBuf)]| {
            v.iter()
                .find(|(i, _)| i == id)
                .map(|(_, p)| p.clone())
                .expect("matched")
        };
        let pred = load_segmentation(&find(&preds))?;
        let gt = load_segmentation(&find(&gts))?;
        let rows = evaluate_case(id, &pred, &gt)?;
        let mut images = Vec::new();
        if !overlay_planes.is_empty() {
            let (flair, _) = read_volume(&case_file(gt_dir, id, Modality::Flair.suffix()))?;
            for &plane in overlay_planes {
                let path = out.join("overlays").join(format!("{id}_{plane}.png"));
                write_comparison_overlay(&path, &flair, &gt.voxels, &pred.voxels, plane)?;
                images.push(path);
            }
        }
        Ok((rows, images))
    })?;
    let mut rows = Vec::new();
    let mut overlays = Vec::new();
    for (_, (r, o)) in all_succeeded(results)? {
        rows.extend(r);
        overlays.extend(o);
    }
    let summary = summarize(&rows);
    write_rows(&out.join(METRICS_CSV), &rows)?;
    write_rows(&out.join(SUMMARY_CSV), &summary)?;
    let txt = out.join(SUMMARY_TXT);
    std::fs::write(&txt, format_summary(&summary)).map_err(|e| Error::io(&txt, e))?;
    Ok(EvaluationOutcome {
        rows,
        summary,
        overlays,
    })
}

fn case_bottlenecks(
    case: &CaseBundle,
    models: &[(Plane, NetworkParams)],
    slab_size: usize,
) -> Result<[crate::tensor::FeatureMap; 3]> {
    let get = |plane: Plane| {
        let (_, m) = models
            .iter()
            .find(|(p, _)| *p == plane)
            .expect("all planes loaded");
        plane_bottlenecks(case, plane, m, slab_size)
    };
    Ok([
        get(Plane::Sagittal)?,
        get(Plane::Coronal)?,
        get(Plane::Axial)?,
    ])
}

/// Trains the survival heads and ANN on frozen bottlenecks of every
/// preprocessed case with age and survival days.
pub fn cmd_train_surv(cfg: &RunConfig) -> Result<SurvivalReport> {
    cfg.validate()?;
    let models = load_plane_models(cfg, &Plane::ALL)?;
    let pre = cfg.layout().preprocessed();
    let ids = preprocessed_ids(cfg, &[])?;
    let table = read_table(&pre)?.ok_or_else(|| {
        Error::InsufficientData(format!("no {SURVIVAL_CSV} in {}", pre.display()))
    })?;
    let ids: Vec<String> = ids
        .into_iter()
        .filter(|id| {
            table
                .get(id)
                .is_some_and(|c| c.age.is_some() && c.survival_days.is_some())
        })
        .collect();
    let slab = cfg.survival.slab_size;
    let results = run_per_case(cfg.workers, &ids, |id| {
        let case = load_case_with(&pre, id, Some(&table))?;
        Ok(BottleneckSample {
            case_id: id.to_string(),
            bottlenecks: case_bottlenecks(&case, &models, slab)?,
            age: case.clinical.age.expect("filtered"),
            survival_days: case.clinical.survival_days,
        })
    })?;
    let samples: Vec<BottleneckSample> = all_succeeded(results)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let (model, report) = train_survival_joint(&samples, &cfg.survival)?;
    let dir = cfg.layout().survival_model();
    echo(cfg, &dir)?;
    model.save(&dir)?;
    write_feature_cache(&dir.join(FEATURE_CACHE), &cache_features(&model, &samples)?)?;
    let rp = dir.join(SURVIVAL_REPORT);
    std::fs::write(&rp, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&rp, e))?;
    Ok(report)
}

/// One row of the survival prediction CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalPrediction {
    pub case_id: String,
    pub predicted_days: Option<f64>,
    pub class: Option<SurvivalClass>,
    /// Reason the case could not be predicted.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictSurvOutcome {
    pub rows: Vec<SurvivalPrediction>,
    /// Against known survival days, when requested and available.
    pub metrics: Option<SurvivalMetrics>,
}

impl PredictSurvOutcome {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.error.is_none())
    }
}

/// Predicts survival days for preprocessed cases. Cases without an age get a
/// row with the error flag set; predictions are floored at zero days.
pub fn cmd_predict_surv(
    cfg: &RunConfig,
    ids: &[String],
    evaluate: bool,
) -> Result<PredictSurvOutcome> {
    let models = load_plane_models(cfg, &Plane::ALL)?;
    let model = SurvivalModel::load(&cfg.layout().survival_model())?;
    let pre = cfg.layout().preprocessed();
    let ids = preprocessed_ids(cfg, ids)?;
    let table = read_table(&pre)?.unwrap_or_default();
    let slab = model.config.slab_size;
    let thresholds = model.config.thresholds;
    let results = run_per_case(cfg.workers, &ids, |id| {
        let case = load_case_with(&pre, id, Some(&table))?;
        let Some(age) = case.clinical.age else {
            return Ok(SurvivalPrediction {
                case_id: id.to_string(),
                predicted_days: None,
                class: None,
                error: Some("missing age".into()),
            });
        };
        let features = model.features_from_bottlenecks(&case_bottlenecks(&case, &models, slab)?)?;
        let days = model.predict(&features, age)?.max(0.0);
        Ok(SurvivalPrediction {
            case_id: id.to_string(),
            predicted_days: Some(days),
            class: Some(classify_survival(days, &thresholds)?),
            error: None,
        })
    })?;
    let rows: Vec<SurvivalPrediction> = all_succeeded(results)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let out = cfg.layout().predictions();
    echo(cfg, &out)?;
    write_rows(&out.join(SURVIVAL_PREDICTIONS), &rows)?;
    let metrics = if evaluate {
        let (p, t): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter_map(|r| Some((r.predicted_days?, table.get(&r.case_id)?.survival_days?)))
            .unzip();
        if p.is_empty() {
            return Err(Error::InsufficientData(
                "no predicted case has known survival days".into(),
            ));
        }
        let m = evaluate_survival(&p, &t, &thresholds)?;
        let path = out.join(SURVIVAL_METRICS);
        std::fs::write(&path, serde_json::to_string_pretty(&m)?)
            .map_err(|e| Error::io(&path, e))?;
        Some(m)
    } else {
        None
    };
    Ok(PredictSurvOutcome { rows, metrics })
}

/// Writes `count` phantoms (with clinical CSV) in the BraTS layout.
pub fn cmd_make_phantoms(root: &Path, count: usize, spec: &PhantomSpec) -> Result<Vec<String>> {
    if count == 0 {
        return Err(Error::Config("phantom count must be at least 1".into()));
    }
    let cases = make_phantom_set(count, spec)?;
    write_dataset(root, &cases)?;
    Ok(cases.into_iter().map(|c| c.case_id).collect())
}
