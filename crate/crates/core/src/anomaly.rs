//! Reconstruction-error scoring, anomaly maps, ROC threshold selection and
//! classification metrics. Abnormal is the positive class and a window is
//! predicted abnormal when its score is strictly above the threshold.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth::DepthMap;
use crate::localize::DefectBox;
use crate::nnet::{reconstruct, Cae, NnError};
use crate::sampler::{extract_windows, SampleError, SampleLabel, SampleSet};
use crate::tows::TowLayout;

#[derive(Debug, Error)]
pub enum AnomalyError {
    #[error("{0} class has no scores")]
    EmptyClass(&'static str),
    #[error("threshold must be finite, got {0}")]
    NonFiniteThreshold(f64),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error("anomaly map csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// Mean squared pixel error between a window and its reconstruction.
pub fn window_mse(original: &[f32], reconstruction: &[f32]) -> f64 {
    assert_eq!(original.len(), reconstruction.len(), "window shapes differ");
    let sum: f64 = original
        .iter()
        .zip(reconstruction)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum();
    sum / original.len() as f64
}

/// One score per sample, in order.
pub fn score_windows(model: &Cae<f32>, set: &SampleSet) -> Result<Vec<f64>, AnomalyError> {
    let per = set.window * set.window;
    let pixels = set.flat_pixels();
    let recon = reconstruct(model, &pixels, 256)?;
    Ok(pixels
        .chunks(per)
        .zip(recon.chunks(per))
        .map(|(p, r)| window_mse(p, r))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub center_x: usize,
    pub center_y: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowSignal {
    pub tow_index: usize,
    /// Ordered by `center_x`.
    pub points: Vec<ScorePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    pub width: usize,
    pub height: usize,
    pub window: usize,
    pub stride: usize,
    pub tows: Vec<TowSignal>,
}

impl AnomalyMap {
    /// Groups scored samples by tow.
    pub fn from_scores(set: &SampleSet, scores: &[f64], width: usize, height: usize) -> Self {
        let mut tows: Vec<TowSignal> = Vec::new();
        for (s, &score) in set.samples.iter().zip(scores) {
            let point = ScorePoint {
                center_x: s.center_x,
                center_y: s.center_y,
                score,
            };
            match tows.iter_mut().find(|t| t.tow_index == s.tow_index) {
                Some(t) => t.points.push(point),
                None => tows.push(TowSignal {
                    tow_index: s.tow_index,
                    points: vec![point],
                }),
            }
        }
        tows.sort_by_key(|t| t.tow_index);
        for t in &mut tows {
            t.points.sort_by_key(|p| p.center_x);
        }
        Self {
            width,
            height,
            window: set.window,
            stride: set.stride,
            tows,
        }
    }

    pub fn tow(&self, tow_index: usize) -> Option<&TowSignal> {
        self.tows.iter().find(|t| t.tow_index == tow_index)
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.tows
            .iter()
            .flat_map(|t| t.points.iter().map(|p| p.score))
    }

    /// The highest-scoring point and its tow.
    pub fn peak(&self) -> Option<(usize, ScorePoint)> {
        self.tows
            .iter()
            .flat_map(|t| t.points.iter().map(move |p| (t.tow_index, *p)))
            .max_by(|a, b| a.1.score.total_cmp(&b.1.score))
    }

    /// CSV with a leading `#` line carrying the map geometry, then
    /// `tow_index,center_x,center_y,mse` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# width={} height={} window={} stride={}\ntow_index,center_x,center_y,mse\n",
            self.width, self.height, self.window, self.stride
        );
        for t in &self.tows {
            for p in &t.points {
                writeln!(
                    out,
                    "{},{},{},{:e}",
                    t.tow_index, p.center_x, p.center_y, p.score
                )
                .expect("string write");
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, AnomalyError> {
        let err = |line: usize, reason: String| AnomalyError::Csv { line, reason };
        let mut lines = text.lines().enumerate();
        let (_, meta) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let mut geom = [None; 4];
        for part in meta.trim_start_matches('#').split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| err(1, format!("bad field {part:?}")))?;
            let slot = ["width", "height", "window", "stride"]
                .iter()
                .position(|n| *n == k)
                .ok_or_else(|| err(1, format!("unknown field {k:?}")))?;
            geom[slot] = Some(v.parse::<usize>().map_err(|e| err(1, e.to_string()))?);
        }
        let [Some(width), Some(height), Some(window), Some(stride)] = geom else {
            return Err(err(1, "missing geometry".into()));
        };
        match lines.next() {
            Some((_, "tow_index,center_x,center_y,mse")) => {}
            _ => return Err(err(2, "missing column header".into())),
        }
        let mut tows: Vec<TowSignal> = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(i + 1, format!("expected 4 fields, found {}", f.len())));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| err(i + 1, e.to_string()))
            };
            let tow_index = num(f[0])?;
            let score: f64 = f[3]
                .trim()
                .parse()
                .map_err(|e: std::num::ParseFloatError| err(i + 1, e.to_string()))?;
            if !(score >= 0.0 && score.is_finite()) {
                return Err(err(
                    i + 1,
                    format!("score {score} is not a finite non-negative value"),
                ));
            }
            let point = ScorePoint {
                center_x: num(f[1])?,
                center_y: num(f[2])?,
                score,
            };
            match tows.last_mut() {
                Some(t) if t.tow_index == tow_index => {
                    if t.points
                        .last()
                        .is_some_and(|p| p.center_x >= point.center_x)
                    {
                        return Err(err(i + 1, "center_x must increase within a tow".into()));
                    }
                    t.points.push(point)
                }
                _ => tows.push(TowSignal {
                    tow_index,
                    points: vec![point],
                }),
            }
        }
        Ok(Self {
            width,
            height,
            window,
            stride,
            tows,
        })
    }
}

/// Scores every window of a normalized scan and groups them by tow.
pub fn build_anomaly_map(
    model: &Cae<f32>,
    map: &DepthMap,
    layout: &TowLayout,
    stride: usize,
) -> Result<AnomalyMap, AnomalyError> {
    let set = extract_windows(map, layout, model.input_size(), stride)?;
    let scores = score_windows(model, &set)?;
    Ok(AnomalyMap::from_scores(
        &set,
        &scores,
        map.width(),
        map.height(),
    ))
}

/// Labels windows against ground-truth boxes: abnormal when the overlap
/// covers at least `min_fraction` of the window, normal when there is no
/// overlap, unlabeled in between.
pub fn label_windows(set: &mut SampleSet, boxes: &[DefectBox], min_fraction: f64) {
    let w = set.window as f64;
    let b = (set.window / 2) as f64;
    for s in &mut set.samples {
        let (x0, y0) = (s.center_x as f64 - b, s.center_y as f64 - b);
        let overlap = boxes
            .iter()
            .map(|bx| {
                let ix = ((x0 + w).min(bx.x + bx.w) - x0.max(bx.x)).max(0.0);
                let iy = ((y0 + w).min(bx.y + bx.h) - y0.max(bx.y)).max(0.0);
                ix * iy
            })
            .fold(0.0, f64::max);
        s.label = if overlap == 0.0 {
            SampleLabel::Normal
        } else if overlap >= min_fraction * w * w {
            SampleLabel::Abnormal
        } else {
            SampleLabel::Unlabeled
        };
    }
}

/// `(normal, abnormal)` scores of labeled samples; unlabeled ones are dropped.
pub fn split_by_label(set: &SampleSet, scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (mut normal, mut abnormal) = (Vec::new(), Vec::new());
    for (s, &v) in set.samples.iter().zip(scores) {
        match s.label {
            SampleLabel::Normal => normal.push(v),
            SampleLabel::Abnormal => abnormal.push(v),
            SampleLabel::Unlabeled => {}
        }
    }
    (normal, abnormal)
}

/// Linear-interpolated quantile, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Score statistics of the training set, kept alongside a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreProfile {
    pub mean: f64,
    pub p99: f64,
    pub p999: f64,
    pub max: f64,
}

impl ScoreProfile {
    pub fn from_scores(scores: &[f64]) -> Self {
        Self {
            mean: scores.iter().sum::<f64>() / scores.len() as f64,
            p99: percentile(scores, 0.99),
            p999: percentile(scores, 0.999),
            max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From `(0, 0)` at `+∞` to `(1, 1)` at `-∞`, thresholds descending.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Exact ROC: one operating point per gap between distinct scores, with
/// thresholds at the midpoints, plus the two infinite sentinels.
pub fn roc_curve(normal: &[f64], abnormal: &[f64]) -> Result<RocCurve, AnomalyError> {
    if normal.is_empty() {
        return Err(AnomalyError::EmptyClass("normal"));
    }
    if abnormal.is_empty() {
        return Err(AnomalyError::EmptyClass("abnormal"));
    }
    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, false))
        .chain(abnormal.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_neg, n_pos) = (normal.len() as f64, abnormal.len() as f64);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = match all.get(i) {
            Some(&(next, _)) => 0.5 * (s + next),
            None => f64::NEG_INFINITY,
        };
        points.push(RocPoint {
            fpr: fp as f64 / n_neg,
            tpr: tp as f64 / n_pos,
            threshold,
        });
    }
    let auc = points
        .windows(2)
        .map(|p| (p[1].fpr - p[0].fpr) * (p[1].tpr + p[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// The operating point nearest `(0, 1)`; ties go to the lower false-positive
/// rate, then the higher threshold.
pub fn best_threshold(curve: &RocCurve) -> RocPoint {
    let dist = |p: &RocPoint| p.fpr * p.fpr + (1.0 - p.tpr) * (1.0 - p.tpr);
    *curve
        .points
        .iter()
        .min_by(|a, b| {
            dist(a)
                .total_cmp(&dist(b))
                .then(a.fpr.total_cmp(&b.fpr))
                .then(b.threshold.total_cmp(&a.threshold))
        })
        .expect("curve has sentinels")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Metrics that would divide by zero are `None` (`null` in JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub threshold: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub confusion: Confusion,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_report(
    normal: &[f64],
    abnormal: &[f64],
    threshold: f64,
) -> Result<ClassificationReport, AnomalyError> {
    if !threshold.is_finite() {
        return Err(AnomalyError::NonFiniteThreshold(threshold));
    }
    let tp = abnormal.iter().filter(|&&s| s > threshold).count();
    let fp = normal.iter().filter(|&&s| s > threshold).count();
    let c = Confusion {
        tp,
        fp,
        tn: normal.len() - fp,
        fn_: abnormal.len() - tp,
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, abnormal.len());
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(ClassificationReport {
        threshold,
        precision,
        recall,
        f1,
        accuracy: ratio(c.tp + c.tn, normal.len() + abnormal.len()),
        auc: roc_curve(normal, abnormal).ok().map(|r| r.auc),
        confusion: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::WindowSample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_cases() {
        let a = vec![0.25f32; 1024];
        assert_eq!(window_mse(&a, &a), 0.0);
        let mut b = a.clone();
        b[7] = 1.25;
        assert!((window_mse(&a, &b) - 1.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_separation() {
        let c = roc_curve(&[0.1, 0.2], &[0.8, 0.9]).unwrap();
        assert_eq!(c.auc, 1.0);
        let p = best_threshold(&c);
        assert_eq!((p.fpr, p.tpr), (0.0, 1.0));
        assert!(p.threshold > 0.2 && p.threshold < 0.8);
        let r = classification_report(&[0.1, 0.2], &[0.8, 0.9], p.threshold).unwrap();
        assert_eq!(
            (r.precision, r.recall, r.f1, r.accuracy),
            (Some(1.0), Some(1.0), Some(1.0), Some(1.0))
        );
    }

    #[test]
    fn identical_distributions_give_half() {
        let s = [0.3, 0.1, 0.5, 0.5, 0.2];
        let c = roc_curve(&s, &s).unwrap();
        assert!((c.auc - 0.5).abs() < 1e-15);
        let p = best_threshold(&c);
        assert_eq!(p.fpr, p.tpr);
    }

    #[test]
    fn curve_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n: Vec<f64> = (0..50).map(|_| rng.gen_range(0..10) as f64).collect();
        let a: Vec<f64> = (0..30).map(|_| rng.gen_range(3..14) as f64).collect();
        let c = roc_curve(&n, &a).unwrap();
        let first = c.points[0];
        let last = *c.points.last().unwrap();
        assert_eq!(
            (first.fpr, first.tpr, last.fpr, last.tpr),
            (0.0, 0.0, 1.0, 1.0)
        );
        for w in c.points.windows(2) {
            assert!(
                w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr && w[1].threshold < w[0].threshold
            );
        }
    }

    #[test]
    fn empty_class_is_an_error() {
        assert!(matches!(
            roc_curve(&[], &[1.0]),
            Err(AnomalyError::EmptyClass("normal"))
        ));
        assert!(matches!(
            roc_curve(&[1.0], &[]),
            Err(AnomalyError::EmptyClass("abnormal"))
        ));
    }

    #[test]
    fn all_predicted_normal() {
        let r = classification_report(&[0.1, 0.2], &[0.3], 5.0).unwrap();
        assert_eq!(r.recall, Some(0.0));
        assert_eq!(r.precision, None);
        assert_eq!(r.f1, None);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["precision"].is_null());
        assert_eq!(json["confusion"]["fn"], 1);
        assert!(classification_report(&[0.1], &[0.3], f64::NAN).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&[1.0, 2.0], 0.5), 1.5);
    }

    fn sample(cx: usize, cy: usize, tow: usize) -> WindowSample {
        WindowSample {
            pixels: vec![0.0; 1024],
            center_x: cx,
            center_y: cy,
            tow_index: tow,
            label: SampleLabel::Unlabeled,
        }
    }

    #[test]
    fn labels_follow_overlap() {
        let mut set = SampleSet::empty("t", 32, 8);
        set.samples = vec![sample(16, 16, 0), sample(48, 16, 0), sample(72, 16, 0)];
        let gt = DefectBox {
            x: 60.0,
            y: 0.0,
            w: 20.0,
            h: 21.0,
            tow: 0,
            sigma: None,
            response: None,
            label: None,
        };
        label_windows(&mut set, &[gt], 0.1);
        let labels: Vec<_> = set.samples.iter().map(|s| s.label).collect();
        // the second window sees 4·21 = 84 px of the box, under 10%
        assert_eq!(
            labels,
            vec![
                SampleLabel::Normal,
                SampleLabel::Unlabeled,
                SampleLabel::Abnormal
            ]
        );
    }

    #[test]
    fn map_groups_and_csv_round_trip() {
        let mut set = SampleSet::empty("t", 32, 8);
        set.samples = vec![sample(24, 40, 1), sample(16, 16, 0), sample(16, 40, 1)];
        let map = AnomalyMap::from_scores(&set, &[0.3, 0.1, 0.2], 64, 64);
        assert_eq!(map.tows.len(), 2);
        assert_eq!(
            map.tow(1)
                .unwrap()
                .points
                .iter()
                .map(|p| p.center_x)
                .collect::<Vec<_>>(),
            vec![16, 24]
        );
        assert_eq!(map.peak().unwrap().0, 1);
        let back = AnomalyMap::from_csv(&map.to_csv()).unwrap();
        assert_eq!(back, map);
        assert!(AnomalyMap::from_csv("# width=1\nfoo\n").is_err());
    }
}
