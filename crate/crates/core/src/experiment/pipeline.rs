//! The extract, train, evaluate and predict commands.
//!
//! Output layout under the configured directory:
//! `features/<stem>.<key>.sedf`, `models/fold<N>.sedm`,
//! `models/fold<N>.history.txt`, `reports/report.txt`, `reports/report.kv`
//! and `predictions/<stem>.txt`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, FeatureSpec, StoredFeature};
use crate::audio::{
    annotations_to_roll_frames, build_manifest, format_annotations, parse_annotations, read_wav, roll_to_events,
    DatasetManifest, EventRoll, ManifestEntry, FRAME_HOP_SECONDS,
};
use crate::error::{Error, Result};
use crate::metrics::{compare_rolls, report_from_counts, MetricReport, SegmentCounts, SEGMENT_SECONDS};
use crate::neural::model::BranchSpec;
use crate::neural::{self, read_checkpoint, write_checkpoint, Architecture, Checkpoint, LabeledSequence, Model};
use crate::volume::{apply_normalizer, fit_normalizer, read_volume, write_volume, FeatureVolume, NormStats};

pub fn features_dir(out: &Path) -> PathBuf {
    out.join("features")
}

pub fn models_dir(out: &Path) -> PathBuf {
    out.join("models")
}

pub fn reports_dir(out: &Path) -> PathBuf {
    out.join("reports")
}

pub fn predictions_dir(out: &Path) -> PathBuf {
    out.join("predictions")
}

pub fn checkpoint_path(out: &Path, fold: u32) -> PathBuf {
    models_dir(out).join(format!("fold{fold}.sedm"))
}

pub fn history_path(out: &Path, fold: u32) -> PathBuf {
    models_dir(out).join(format!("fold{fold}.history.txt"))
}

/// File stem shared by every artifact derived from a recording.
pub fn recording_stem(entry: &ManifestEntry) -> String {
    entry.audio.with_extension("").to_string_lossy().replace(['/', '\\'], "_")
}

pub fn feature_path(out: &Path, entry: &ManifestEntry, stored: StoredFeature) -> PathBuf {
    features_dir(out).join(format!("{}.{}.sedf", recording_stem(entry), stored.key()))
}

fn load_manifest(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let root = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::validation("no dataset configured (set `dataset` or pass --config)"))?;
    build_manifest(root)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn stored_features(specs: &[FeatureSpec]) -> Vec<StoredFeature> {
    specs.iter().map(|s| s.stored).collect::<BTreeSet<_>>().into_iter().collect()
}

fn is_up_to_date(output: &Path, input: &Path) -> bool {
    let modified = |p: &Path| fs::metadata(p).and_then(|m| m.modified()).ok();
    matches!((modified(output), modified(input)), (Some(o), Some(i)) if o >= i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExtractSummary {
    pub written: usize,
    pub skipped: usize,
}

fn extract_one(cfg: &ExperimentConfig, manifest: &DatasetManifest, entry: &ManifestEntry, kinds: &[StoredFeature]) -> Result<ExtractSummary> {
    let audio = manifest.audio_path(entry);
    let pending: Vec<_> = kinds
        .iter()
        .copied()
        .filter(|&k| cfg.force || !is_up_to_date(&feature_path(&cfg.out, entry, k), &audio))
        .collect();
    let mut summary = ExtractSummary {
        written: 0,
        skipped: kinds.len() - pending.len(),
    };
    if pending.is_empty() {
        return Ok(summary);
    }
    let clip = read_wav(&audio, cfg.sample_rate)?;
    for kind in pending {
        let volume = kind.extract(&clip, cfg.sample_rate)?;
        write_volume(feature_path(&cfg.out, entry, kind), &volume)?;
        summary.written += 1;
    }
    Ok(summary)
}

/// Write one volume file per (recording, stored feature) for every recording
/// in the manifest. Files newer than their audio are kept unless `force`.
pub fn cmd_extract(cfg: &ExperimentConfig) -> Result<ExtractSummary> {
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let kinds = stored_features(&cfg.feature_specs()?);
    let mut stems = BTreeSet::new();
    if let Some(e) = manifest.entries.iter().find(|e| !stems.insert(recording_stem(e))) {
        return Err(Error::validation(format!("two recordings map to feature stem `{}`", recording_stem(e))));
    }
    create_dir(&features_dir(&cfg.out))?;
    let entries = &manifest.entries;
    let results: Vec<Result<ExtractSummary>> = if cfg.threads == 0 {
        entries.iter().map(|e| extract_one(cfg, &manifest, e, &kinds)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<ExtractSummary>>>> = Mutex::new((0..entries.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..cfg.threads.min(entries.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(entry) = entries.get(i) else { break };
                    let r = extract_one(cfg, &manifest, entry, &kinds);
                    slots.lock().expect("worker panicked")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("worker panicked")
            .into_iter()
            .map(|r| r.expect("every recording visited"))
            .collect()
    };
    let mut total = ExtractSummary::default();
    for r in results {
        let s = r?;
        total.written += s.written;
        total.skipped += s.skipped;
    }
    info!("extract: {} written, {} up to date", total.written, total.skipped);
    Ok(total)
}

/// A recording's stored volumes and reference events.
struct Recording {
    stem: String,
    context: String,
    volumes: Vec<FeatureVolume>,
    reference: EventRoll,
}

fn load_recording(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    specs: &[FeatureSpec],
) -> Result<Recording> {
    let mut volumes = Vec::with_capacity(specs.len());
    for spec in specs {
        let path = feature_path(&cfg.out, entry, spec.stored);
        let volume = read_volume(&path).map_err(|e| match e {
            Error::Io { path, source } if source.kind() == io::ErrorKind::NotFound => Error::Io {
                path,
                source: io::Error::new(
                    io::ErrorKind::NotFound,
                    format!("feature `{}` not extracted; run `sed extract` first", spec.stored.key()),
                ),
            },
            other => other,
        })?;
        volumes.push(volume);
    }
    let frames = volumes[0].frames();
    if volumes.iter().any(|v| v.frames() != frames) {
        return Err(Error::validation(format!(
            "{}: feature volumes disagree on frame count",
            entry.audio.display()
        )));
    }
    let events = parse_annotations(manifest.annotation_path(entry))?;
    let reference = annotations_to_roll_frames(&events, frames, &manifest.class_list, FRAME_HOP_SECONDS)?;
    Ok(Recording {
        stem: recording_stem(entry),
        context: entry.context.clone(),
        volumes,
        reference,
    })
}

fn load_folds(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    folds: &[u32],
    specs: &[FeatureSpec],
) -> Result<Vec<Recording>> {
    manifest
        .entries_in_folds(folds)
        .map(|e| load_recording(cfg, manifest, e, specs))
        .collect()
}

fn fit_norms(recs: &[Recording], specs: &[FeatureSpec]) -> Result<BTreeMap<String, NormStats>> {
    let mut norms = BTreeMap::new();
    for (i, spec) in specs.iter().enumerate() {
        let vols: Vec<&FeatureVolume> = recs.iter().map(|r| &r.volumes[i]).collect();
        norms.insert(spec.stored.key().to_string(), fit_normalizer(&vols)?);
    }
    Ok(norms)
}

/// Normalize (when stats are given) and arrange one recording's inputs.
fn model_inputs(rec: &Recording, specs: &[FeatureSpec], norms: &BTreeMap<String, NormStats>) -> Result<Vec<Array3<f64>>> {
    specs
        .iter()
        .zip(&rec.volumes)
        .map(|(spec, v)| {
            let v = match norms.get(spec.stored.key()) {
                Some(stats) => apply_normalizer(v, stats)?,
                None => v.clone(),
            };
            Ok(if spec.concat { v.to_concatenated() } else { v }.into_data())
        })
        .collect()
}

fn to_sequence(rec: &Recording, specs: &[FeatureSpec], norms: &BTreeMap<String, NormStats>) -> Result<LabeledSequence> {
    Ok(LabeledSequence {
        inputs: model_inputs(rec, specs, norms)?,
        targets: rec.reference.to_targets(),
        context: rec.context.clone(),
    })
}

/// The architecture implied by the configured features and the stored
/// volume shapes.
fn architecture(cfg: &ExperimentConfig, specs: &[FeatureSpec], sample: &Recording, classes: &[String]) -> Result<Architecture> {
    let branches = specs
        .iter()
        .zip(&sample.volumes)
        .map(|(spec, v)| {
            let (_, l, c) = v.shape();
            let (l, c) = if spec.concat { (l * c, 1) } else { (l, c) };
            BranchSpec::standard(spec.name.clone(), l, c, cfg.filters)
        })
        .collect();
    Architecture::new(branches, cfg.hidden, classes.to_vec())
}

fn describe_branches(arch: &Architecture) -> String {
    arch.branches
        .iter()
        .map(|b| format!("{} {}x{}", b.name, b.input_len, b.input_layers))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Test folds to run, checked against the manifest.
fn selected_folds(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<Vec<u32>> {
    let n = manifest.num_folds();
    if cfg.folds.is_empty() {
        return Ok((1..=n).collect());
    }
    if let Some(f) = cfg.folds.iter().find(|&&f| f == 0 || f > n) {
        return Err(Error::validation(format!("fold {f} outside manifest range 1..={n}")));
    }
    Ok(cfg.folds.clone())
}

/// Validation fold paired with test fold `fold` out of `n`.
pub fn validation_fold(fold: u32, n: u32) -> u32 {
    fold % n + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub fold: u32,
    pub history: neural::History,
}

/// Train one model per selected test fold. Each writes its best checkpoint
/// and its history table.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<FoldOutcome>> {
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let folds = selected_folds(cfg, &manifest)?;
    let n = manifest.num_folds();
    if n < 3 {
        return Err(Error::validation(format!(
            "need at least 3 folds (test, validation, training), manifest has {n}"
        )));
    }
    let specs = cfg.feature_specs()?;
    create_dir(&models_dir(&cfg.out))?;
    let mut outcomes = Vec::with_capacity(folds.len());
    for fold in folds {
        let val_fold = validation_fold(fold, n);
        let train_folds: Vec<u32> = (1..=n).filter(|&f| f != fold && f != val_fold).collect();
        let train_recs = load_folds(cfg, &manifest, &train_folds, &specs)?;
        let val_recs = load_folds(cfg, &manifest, &[val_fold], &specs)?;
        let sample = train_recs
            .first()
            .ok_or_else(|| Error::validation(format!("fold {fold}: training split is empty")))?;
        let norms = if cfg.normalize {
            fit_norms(&train_recs, &specs)?
        } else {
            BTreeMap::new()
        };
        let arch = architecture(cfg, &specs, sample, &manifest.class_list)?;
        let train_set = train_recs
            .iter()
            .map(|r| to_sequence(r, &specs, &norms))
            .collect::<Result<Vec<_>>>()?;
        let val_set = val_recs
            .iter()
            .map(|r| to_sequence(r, &specs, &norms))
            .collect::<Result<Vec<_>>>()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed());
        init_rng.set_stream(1);
        let model = Model::init(arch, &mut init_rng)?;
        info!(
            "fold {fold}: training on folds {train_folds:?}, validating on {val_fold}, branches [{}]",
            describe_branches(&model.arch)
        );
        let (model, history) = neural::train(model, &train_set, &val_set, &cfg.train)?;
        write_checkpoint(checkpoint_path(&cfg.out, fold), &Checkpoint { model, norm: norms })?;
        let path = history_path(&cfg.out, fold);
        fs::write(&path, history.to_table()).map_err(|e| Error::io(&path, e))?;
        outcomes.push(FoldOutcome { fold, history });
    }
    Ok(outcomes)
}

/// Read a fold's checkpoint and check it was trained on the configured inputs.
fn load_model(cfg: &ExperimentConfig, manifest: &DatasetManifest, specs: &[FeatureSpec], path: &Path, sample: &Recording) -> Result<Checkpoint> {
    let ck = read_checkpoint(path)?;
    let expected = architecture(cfg, specs, sample, &manifest.class_list)?;
    let same_inputs = expected.branches.len() == ck.model.arch.branches.len()
        && expected
            .branches
            .iter()
            .zip(&ck.model.arch.branches)
            .all(|(a, b)| (&a.name, a.input_len, a.input_layers) == (&b.name, b.input_len, b.input_layers));
    if !same_inputs {
        return Err(Error::validation(format!(
            "checkpoint {} does not match the configured features: expected branches [{}], found [{}]",
            path.display(),
            describe_branches(&expected),
            describe_branches(&ck.model.arch)
        )));
    }
    if ck.model.arch.classes != manifest.class_list {
        return Err(Error::validation(format!(
            "checkpoint {} classes [{}] differ from dataset classes [{}]",
            path.display(),
            ck.model.arch.classes.join(", "),
            manifest.class_list.join(", ")
        )));
    }
    Ok(ck)
}

fn predict_recording(ck: &Checkpoint, rec: &Recording, specs: &[FeatureSpec], cfg: &ExperimentConfig) -> Result<EventRoll> {
    let inputs = model_inputs(rec, specs, &ck.norm)?;
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    neural::predict(&ck.model, &views, cfg.train.threshold, cfg.train.sequence_length)
}

/// Run `f` on every test recording of every selected fold with that fold's
/// model (or `checkpoint` when given).
fn for_each_test_recording(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    mut f: impl FnMut(&Recording, EventRoll) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let folds = selected_folds(cfg, &manifest)?;
    let specs = cfg.feature_specs()?;
    for fold in folds {
        let recs = load_folds(cfg, &manifest, &[fold], &specs)?;
        let Some(sample) = recs.first() else { continue };
        let path = checkpoint.map_or_else(|| checkpoint_path(&cfg.out, fold), Path::to_path_buf);
        let ck = load_model(cfg, &manifest, &specs, &path, sample)?;
        for rec in &recs {
            let system = predict_recording(&ck, rec, &specs, cfg)?;
            f(rec, system)?;
        }
    }
    Ok(())
}

/// Score the test folds. Segment counts are pooled per context across folds
/// before F and ER are computed. Writes `report.txt` and `report.kv`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<MetricReport> {
    let mut pooled: BTreeMap<String, SegmentCounts> = BTreeMap::new();
    for_each_test_recording(cfg, checkpoint, |rec, system| {
        let counts = compare_rolls(&rec.reference, &system, SEGMENT_SECONDS)?;
        pooled.entry(rec.context.clone()).or_default().merge(counts);
        Ok(())
    })?;
    let report = report_from_counts(pooled)?.with_tag(cfg.tag());
    let dir = reports_dir(&cfg.out);
    create_dir(&dir)?;
    for (name, body) in [("report.txt", report.to_table()), ("report.kv", report.to_key_values())] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

/// Write predicted events for every test recording; returns the file count.
pub fn cmd_predict(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<usize> {
    let dir = predictions_dir(&cfg.out);
    create_dir(&dir)?;
    let mut written = 0;
    for_each_test_recording(cfg, checkpoint, |rec, system| {
        let path = dir.join(format!("{}.txt", rec.stem));
        fs::write(&path, format_annotations(&roll_to_events(&system))).map_err(|e| Error::io(&path, e))?;
        written += 1;
        Ok(())
    })?;
    Ok(written)
}
