//! One function per subcommand. Corpus stages take a manifest as input and
//! write their artifacts plus an updated manifest into the output directory.
//! Every stage returns a JSON summary for stdout.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use towscan::anomaly::{
    best_threshold, classification_report, label_windows, roc_curve, score_windows, AnomalyMap,
    ClassificationReport, RocCurve, ScoreProfile,
};
use towscan::depth::{load_pgm, preprocess as normalize, save_pgm, DepthMap};
use towscan::localize::{
    blobs_to_boxes, calibrate_floor, detect_map_blobs, iou, load_boxes, match_and_score,
    max_response, save_boxes, DefectBox,
};
use towscan::nnet::{load_weights, loss_csv, save_weights, train as fit, Cae, Trained};
use towscan::render;
use towscan::sampler::{extract_windows_from, SampleLabel, SampleSet};
use towscan::synth::write_corpus;
use towscan::tows::{detect_tows, TowLayout};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::manifest::{require_file, Entry, Manifest, FILE_NAME};

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Ctx {
    fn input(&self) -> Result<&Path, CliError> {
        self.input
            .as_deref()
            .ok_or_else(|| CliError::config("--input is required for this stage"))
    }

    fn manifest(&self) -> Result<Manifest, CliError> {
        let input = self.input()?;
        let path = if input.is_dir() {
            input.join(FILE_NAME)
        } else {
            input.to_path_buf()
        };
        require_file(&path)?;
        Manifest::load(&path)
    }

    /// Output directory, defaulting to the input manifest's directory.
    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = match (&self.output, &self.input) {
            (Some(o), _) => o.clone(),
            (None, Some(i)) if i.is_dir() => i.clone(),
            (None, Some(i)) => i.parent().unwrap_or(Path::new(".")).to_path_buf(),
            (None, None) => return Err(CliError::config("--output is required for this stage")),
        };
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        dir.canonicalize().map_err(|e| CliError::io(&dir, e))
    }

    fn single_file(&self) -> bool {
        self.input
            .as_deref()
            .is_some_and(|p| p.extension().is_some_and(|e| e == "pgm"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_text(
        path,
        &(serde_json::to_string_pretty(value).expect("value serializes") + "\n"),
    )
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(format!("{}: {e}", path.display())))
}

fn load_layout(path: &Path) -> Result<TowLayout, CliError> {
    read_json(path)
}

fn load_normalized(path: &Path) -> Result<DepthMap, CliError> {
    require_file(path)?;
    load_pgm(path)?.into_normalized().map_err(|e| {
        CliError::format(format!(
            "{}: expected a normalized depth map, run preprocess first ({e})",
            path.display()
        ))
    })
}

fn load_windows(path: &Path) -> Result<SampleSet, CliError> {
    require_file(path)?;
    Ok(SampleSet::load(path)?)
}

fn load_map(path: &Path) -> Result<AnomalyMap, CliError> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(AnomalyMap::from_csv(&text)?)
}

fn load_truth(path: &Path) -> Result<Vec<DefectBox>, CliError> {
    require_file(path)?;
    Ok(load_boxes(path)?)
}

pub fn synth_gen(ctx: &Ctx) -> Result<Value, CliError> {
    let dir = ctx
        .output
        .clone()
        .ok_or_else(|| CliError::config("synth-gen needs --output <dir>"))?;
    let c = &ctx.cfg;
    let corpus = write_corpus(
        &dir,
        &c.synth_spec(),
        c.normal_scans,
        c.test_scans,
        c.defects,
    )?;
    let dir = dir.canonicalize().map_err(|e| CliError::io(&dir, e))?;
    let mut extra = Vec::new();
    if c.clean_scans > 0 {
        // defect-free scans for the test split, after the regular ones
        let mut m = Manifest::load(&dir.join(FILE_NAME))?;
        for k in 0..c.clean_scans {
            let spec = towscan::synth::SynthSpec {
                seed: c.seed.wrapping_mul(1000).wrapping_add(900 + k as u64),
                ..c.synth_spec()
            };
            let scan = towscan::synth::generate(&spec)?;
            let id = format!("clean_{k:03}");
            let raw = dir.join(format!("{id}.pgm"));
            save_pgm(&scan.map, &raw)?;
            let truth = dir.join(format!("{id}.boxes.json"));
            save_boxes(&scan.boxes, &truth)?;
            let layout = dir.join(format!("{id}.layout.json"));
            write_text(&layout, &scan.layout.to_json())?;
            m.scans.push(Entry {
                id: id.clone(),
                split: "test".into(),
                raw: Some(raw),
                truth: Some(truth),
                truth_layout: Some(layout),
                ..Entry::default()
            });
            extra.push(id);
        }
        m.save(&dir)?;
    }
    Ok(json!({
        "scans": corpus.scans.len() + extra.len(),
        "train": corpus.split("train").count(),
        "test": corpus.split("test").count() + extra.len(),
        "defects": corpus.scans.iter().map(|e| e.defects).sum::<usize>(),
        "manifest": dir.join(FILE_NAME),
    }))
}

pub fn preprocess(ctx: &Ctx) -> Result<Value, CliError> {
    if ctx.single_file() {
        let input = ctx.input()?;
        let output = ctx
            .output
            .as_deref()
            .ok_or_else(|| CliError::config("preprocess needs --output <file.pgm>"))?;
        require_file(input)?;
        let n = normalize(&load_pgm(input)?);
        save_pgm(&n.map, output)?;
        if n.degenerate {
            eprintln!(
                "warning: {} is constant; the normalized map is all zeros",
                input.display()
            );
        }
        return Ok(
            json!({"degenerate": n.degenerate, "min": n.min, "max": n.max, "output": output}),
        );
    }
    let mut m = ctx.manifest()?;
    let dir = ctx.out_dir()?;
    let mut degenerate = Vec::new();
    for e in &mut m.scans {
        let raw = e.require("raw depth map", &e.raw)?.to_path_buf();
        let n = normalize(&load_pgm(&raw)?);
        let out = dir.join(format!("{}.norm.pgm", e.id));
        save_pgm(&n.map, &out)?;
        if n.degenerate {
            eprintln!(
                "warning: {} is constant; the normalized map is all zeros",
                e.id
            );
            degenerate.push(e.id.clone());
        }
        e.normalized = Some(out);
    }
    let manifest = m.save(&dir)?;
    Ok(json!({"scans": m.scans.len(), "degenerate": degenerate, "manifest": manifest}))
}

pub fn detect(ctx: &Ctx) -> Result<Value, CliError> {
    let tows = ctx.cfg.tow_count;
    if ctx.single_file() {
        let input = ctx.input()?;
        let output = ctx
            .output
            .as_deref()
            .ok_or_else(|| CliError::config("detect-tows needs --output <file.json>"))?;
        let layout = detect_tows(&load_normalized(input)?, tows)?;
        write_text(output, &layout.to_json())?;
        return Ok(json!({"tows": layout.tow_count(), "output": output}));
    }
    let mut m = ctx.manifest()?;
    let dir = ctx.out_dir()?;
    for e in &mut m.scans {
        let map = load_normalized(e.require("normalized map", &e.normalized)?)?;
        let layout = detect_tows(&map, tows)
            .map_err(|err| CliError::new("geometry", format!("{}: {err}", e.id)))?;
        let out = dir.join(format!("{}.layout.json", e.id));
        write_text(&out, &layout.to_json())?;
        e.layout = Some(out);
    }
    let manifest = m.save(&dir)?;
    Ok(json!({"scans": m.scans.len(), "manifest": manifest}))
}

pub fn extract(ctx: &Ctx) -> Result<Value, CliError> {
    let c = &ctx.cfg;
    let mut m = ctx.manifest()?;
    let dir = ctx.out_dir()?;
    let mut counts = [0usize; 3];
    for e in &mut m.scans {
        let map = load_normalized(e.require("normalized map", &e.normalized)?)?;
        let layout = load_layout(e.require("layout", &e.layout)?)?;
        let mut set = extract_windows_from(&map, &layout, c.window, c.stride, &e.id)?;
        if let Some(truth) = &e.truth {
            label_windows(&mut set, &load_truth(truth)?, c.label_fraction);
        }
        for s in &set.samples {
            counts[s.label as usize] += 1;
        }
        let out = dir.join(format!("{}.windows.json", e.id));
        set.save(&out)?;
        e.windows = Some(out);
    }
    let manifest = m.save(&dir)?;
    Ok(json!({
        "windows": counts.iter().sum::<usize>(),
        "unlabeled": counts[SampleLabel::Unlabeled as usize],
        "normal": counts[SampleLabel::Normal as usize],
        "abnormal": counts[SampleLabel::Abnormal as usize],
        "manifest": manifest,
    }))
}

/// Scores and detection floor recorded next to a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub latent_dim: usize,
    pub final_loss: f64,
    pub scores: ScoreProfile,
    pub max_normal_response: f64,
    pub floor_fraction: f64,
    pub floor_margin: f64,
    pub floor: f64,
}

fn training_sets(m: &Manifest) -> Result<Vec<SampleSet>, CliError> {
    let sets: Vec<SampleSet> = m
        .split("train")
        .map(|e| load_windows(e.require("windows", &e.windows)?))
        .collect::<Result<_, _>>()?;
    if sets.is_empty() {
        return Err(CliError::new(
            "missing_artifact",
            "no training scans in the manifest",
        ));
    }
    Ok(sets)
}

fn train_model(
    cfg: &PipelineConfig,
    sets: &[SampleSet],
    latent_dim: usize,
) -> Result<Trained, CliError> {
    let all = SampleSet::concat("train", sets)?;
    if all.window != cfg.window {
        return Err(CliError::config(format!(
            "windows were extracted at {0}x{0}, config says {1}",
            all.window, cfg.window
        )));
    }
    let model = Cae::new(latent_dim, cfg.window, cfg.seed)?;
    Ok(fit(model, &all, &cfg.train_config())?)
}

fn profile(
    cfg: &PipelineConfig,
    model: &Cae<f32>,
    sets: &[SampleSet],
    t: &Trained,
) -> Result<Profile, CliError> {
    let mut scores = Vec::new();
    let mut max_resp = 0.0f64;
    for set in sets {
        let s = score_windows(model, set)?;
        let map = AnomalyMap::from_scores(set, &s, 0, 0);
        max_resp = max_resp.max(max_response(&map, &cfg.scales)?);
        scores.extend(s);
    }
    let sp = ScoreProfile::from_scores(&scores);
    Ok(Profile {
        latent_dim: model.latent_dim(),
        final_loss: *t.loss_history.last().expect("at least one epoch"),
        scores: sp,
        max_normal_response: max_resp,
        floor_fraction: cfg.floor_fraction,
        floor_margin: cfg.floor_margin,
        floor: calibrate_floor(sp.p99, cfg.floor_fraction, max_resp, cfg.floor_margin),
    })
}

pub fn train(ctx: &Ctx) -> Result<Value, CliError> {
    let mut m = ctx.manifest()?;
    let dir = ctx.out_dir()?;
    let sets = training_sets(&m)?;
    let t = train_model(&ctx.cfg, &sets, ctx.cfg.latent_dim)?;
    let weights = dir.join("model.weights");
    save_weights(&t.model, &weights)?;
    write_text(&dir.join("loss.csv"), &loss_csv(&t.loss_history))?;
    let p = profile(&ctx.cfg, &t.model, &sets, &t)?;
    let profile_path = dir.join("profile.json");
    write_json(&profile_path, &p)?;
    m.model = Some(weights);
    m.profile = Some(profile_path);
    let manifest = m.save(&dir)?;
    Ok(
        json!({"latent_dim": p.latent_dim, "final_loss": p.final_loss, "floor": p.floor, "manifest": manifest}),
    )
}

/// `(normal, abnormal)` scores over the labeled windows of the test split.
fn test_scores(m: &Manifest, model: &Cae<f32>) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let (mut normal, mut abnormal) = (Vec::new(), Vec::new());
    for e in m.split("test") {
        let set = load_windows(e.require("windows", &e.windows)?)?;
        let scores = score_windows(model, &set)?;
        let (n, a) = towscan::anomaly::split_by_label(&set, &scores);
        normal.extend(n);
        abnormal.extend(a);
    }
    Ok((normal, abnormal))
}

pub fn sweep(ctx: &Ctx) -> Result<Value, CliError> {
    let m = ctx.manifest()?;
    let dir = ctx.out_dir()?;
    let sets = training_sets(&m)?;
    let mut csv = String::from("latent_dim,final_mse,auc\n");
    let mut rows = Vec::new();
    for &d in &ctx.cfg.latent_dims {
        let t = train_model(&ctx.cfg, &sets, d)?;
        save_weights(&t.model, dir.join(format!("model_latent_{d}.weights")))?;
        write_text(
            &dir.join(format!("loss_latent_{d}.csv")),
            &loss_csv(&t.loss_history),
        )?;
        let (normal, abnormal) = test_scores(&m, &t.model)?;
        let auc = roc_curve(&normal, &abnormal).ok().map(|r| r.auc);
        let last = *t.loss_history.last().expect("at least one epoch");
        csv.push_str(&format!(
            "{d},{last:e},{}\n",
            auc.map_or("".into(), |a| format!("{a:e}"))
        ));
        rows.push(json!({"latent_dim": d, "final_mse": last, "auc": auc}));
    }
    write_text(&dir.join("sweep.csv"), &csv)?;
    Ok(json!({"sweep": rows}))
}

pub fn score(ctx: &Ctx) -> Result<Value, CliError> {
    let mut m = ctx.manifest()?;
    let dir = ctx.out_dir()?;
    let model = load_weights(m.model_path()?)?;
    for e in &mut m.scans {
        let set = load_windows(e.require("windows", &e.windows)?)?;
        let norm = load_normalized(e.require("normalized map", &e.normalized)?)?;
        let scores = score_windows(&model, &set)?;
        let map = AnomalyMap::from_scores(&set, &scores, norm.width(), norm.height());
        let out = dir.join(format!("{}.map.csv", e.id));
        write_text(&out, &map.to_csv())?;
        e.anomaly_map = Some(out);
    }
    let manifest = m.save(&dir)?;
    Ok(json!({"scans": m.scans.len(), "manifest": manifest}))
}

/// Scores of labeled test windows, joined from the anomaly maps by tow and
/// window centre.
fn labeled_map_scores(m: &Manifest) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let (mut normal, mut abnormal) = (Vec::new(), Vec::new());
    for e in m.split("test") {
        let set = load_windows(e.require("windows", &e.windows)?)?;
        let map = load_map(e.require("anomaly map", &e.anomaly_map)?)?;
        let lookup: HashMap<(usize, usize), f64> = map
            .tows
            .iter()
            .flat_map(|t| {
                t.points
                    .iter()
                    .map(move |p| ((t.tow_index, p.center_x), p.score))
            })
            .collect();
        for s in &set.samples {
            let v = *lookup.get(&(s.tow_index, s.center_x)).ok_or_else(|| {
                CliError::format(format!(
                    "{}: no score for tow {} at x {}; rerun score",
                    e.id, s.tow_index, s.center_x
                ))
            })?;
            match s.label {
                SampleLabel::Normal => normal.push(v),
                SampleLabel::Abnormal => abnormal.push(v),
                SampleLabel::Unlabeled => {}
            }
        }
    }
    Ok((normal, abnormal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub auc: f64,
    pub normal: usize,
    pub abnormal: usize,
}

pub fn threshold(ctx: &Ctx) -> Result<Value, CliError> {
    let mut m = ctx.manifest()?;
    let dir = ctx.out_dir()?;
    let (normal, abnormal) = labeled_map_scores(&m)?;
    let curve: RocCurve = roc_curve(&normal, &abnormal)?;
    let best = best_threshold(&curve);
    let mut roc = String::from("fpr,tpr,threshold\n");
    for p in &curve.points {
        roc.push_str(&format!("{:e},{:e},{:e}\n", p.fpr, p.tpr, p.threshold));
    }
    write_text(&dir.join("roc.csv"), &roc)?;
    let t = ThresholdFile {
        threshold: best.threshold,
        fpr: best.fpr,
        tpr: best.tpr,
        auc: curve.auc,
        normal: normal.len(),
        abnormal: abnormal.len(),
    };
    let path = dir.join("threshold.json");
    write_json(&path, &t)?;
    m.threshold = Some(path);
    let manifest = m.save(&dir)?;
    Ok(json!({"threshold": t, "manifest": manifest}))
}

fn floor(ctx: &Ctx, m: &Manifest) -> Result<f64, CliError> {
    if let Some(f) = ctx.cfg.floor {
        return Ok(f);
    }
    let p = m.profile.as_deref().ok_or_else(|| {
        CliError::new(
            "missing_artifact",
            "no detection floor: pass --floor or run train first",
        )
    })?;
    Ok(read_json::<Profile>(p)?.floor)
}

pub fn localize(ctx: &Ctx) -> Result<Value, CliError> {
    let c = &ctx.cfg;
    let mut m = ctx.manifest()?;
    let dir = ctx.out_dir()?;
    let floor = floor(ctx, &m)?;
    let mut total = 0;
    for e in &mut m.scans {
        let map = load_map(e.require("anomaly map", &e.anomaly_map)?)?;
        let layout = load_layout(e.require("layout", &e.layout)?)?;
        let blobs = detect_map_blobs(&map, &c.scales, floor)?;
        let boxes = blobs_to_boxes(
            &blobs,
            &layout,
            c.tow_width,
            map.window,
            map.stride,
            (map.width, map.height),
        )?;
        total += boxes.len();
        let out = dir.join(format!("{}.boxes.json", e.id));
        save_boxes(&boxes, &out)?;
        e.boxes = Some(out);
    }
    let manifest = m.save(&dir)?;
    Ok(json!({"floor": floor, "boxes": total, "manifest": manifest}))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// Mean over all ground-truth boxes; `null` without ground truth.
    pub mean_iou: Option<f64>,
    pub ground_truth: usize,
    /// Ground-truth boxes whose best prediction reaches IoU 0.3.
    pub covered: usize,
    pub predicted: usize,
    pub boxes_on_clean_scans: usize,
    pub per_ground_truth: Vec<GroundTruthScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScore {
    pub scan: String,
    pub tow: usize,
    pub label: Option<String>,
    pub matched_iou: f64,
    pub best_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub classification: ClassificationReport,
    pub localization: Localization,
}

pub fn evaluate(ctx: &Ctx) -> Result<Value, CliError> {
    let m = ctx.manifest()?;
    let dir = ctx.out_dir()?;
    let t: ThresholdFile = read_json(m.threshold.as_deref().ok_or_else(|| {
        CliError::new(
            "missing_artifact",
            "manifest names no threshold; run threshold first",
        )
    })?)?;
    let (normal, abnormal) = labeled_map_scores(&m)?;
    let classification = classification_report(&normal, &abnormal, t.threshold)?;
    let mut loc = Localization {
        mean_iou: None,
        ground_truth: 0,
        covered: 0,
        predicted: 0,
        boxes_on_clean_scans: 0,
        per_ground_truth: Vec::new(),
    };
    let mut sum = 0.0;
    for e in m.split("test") {
        let predicted = load_truth(e.require("boxes", &e.boxes)?)?;
        let truth = match &e.truth {
            Some(p) => load_truth(p)?,
            None => Vec::new(),
        };
        loc.predicted += predicted.len();
        if truth.is_empty() {
            loc.boxes_on_clean_scans += predicted.len();
            continue;
        }
        let r = match_and_score(&predicted, &truth);
        let mut matched = vec![0.0; truth.len()];
        for a in &r.assignments {
            matched[a.ground_truth] = a.iou;
        }
        for (g, b) in truth.iter().enumerate() {
            let best = predicted.iter().map(|p| iou(p, b)).fold(0.0, f64::max);
            loc.covered += usize::from(best >= 0.3);
            sum += matched[g];
            loc.per_ground_truth.push(GroundTruthScore {
                scan: e.id.clone(),
                tow: b.tow,
                label: b.label.clone(),
                matched_iou: matched[g],
                best_iou: best,
            });
        }
    }
    loc.ground_truth = loc.per_ground_truth.len();
    if loc.ground_truth > 0 {
        loc.mean_iou = Some(sum / loc.ground_truth as f64);
    }
    let report = Report {
        classification,
        localization: loc,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

pub fn render_stage(ctx: &Ctx) -> Result<Value, CliError> {
    let m = ctx.manifest()?;
    let dir = ctx.out_dir()?;
    let mut written = Vec::new();
    let save =
        |c: render::Canvas, path: PathBuf, written: &mut Vec<PathBuf>| -> Result<(), CliError> {
            c.save(&path).map_err(|e| CliError::io(&path, e))?;
            written.push(path);
            Ok(())
        };
    for e in &m.scans {
        let Some(norm) = &e.normalized else { continue };
        let map = load_normalized(norm)?;
        if let Some(p) = &e.layout {
            let c = render::layout_overlay(&map, &load_layout(p)?);
            save(c, dir.join(format!("{}.layout.ppm", e.id)), &mut written)?;
        }
        if let Some(p) = &e.anomaly_map {
            let c = render::anomaly_overlay(&map, &load_map(p)?);
            save(c, dir.join(format!("{}.map.ppm", e.id)), &mut written)?;
        }
        if e.boxes.is_some() || e.truth.is_some() {
            let predicted = match &e.boxes {
                Some(p) => load_truth(p)?,
                None => Vec::new(),
            };
            let truth = match &e.truth {
                Some(p) => load_truth(p)?,
                None => Vec::new(),
            };
            let c = render::box_overlay(&map, &predicted, &truth);
            save(c, dir.join(format!("{}.boxes.ppm", e.id)), &mut written)?;
        }
    }
    Ok(json!({"images": written.len()}))
}
