//! Defect localization on per-tow anomaly signals.
//!
//! Each tow's score sequence is filtered with a narrow difference of
//! Gaussians per scale, which approximates the negated scale-normalized
//! second derivative `-σ² ∂²/∂x² (G_σ * f)`. Local maxima over scale and
//! position become blobs and then boxes spanning the full tow width.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::AnomalyMap;
use crate::tows::TowLayout;

/// Default scale ladder in signal samples.
pub const DEFAULT_SCALES: [f64; 7] = [1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0];
/// Default floor as a fraction of the 99th-percentile normal score.
pub const DEFAULT_FLOOR_FRACTION: f64 = 0.3;

/// Variance ratio between the two Gaussians of each DoG pair.
const KAPPA: f64 = 1.1;

#[derive(Debug, Error, PartialEq)]
pub enum LocalizeError {
    #[error("signal of length {0} is shorter than 3 samples")]
    SignalTooShort(usize),
    #[error("scales must be ascending and at least 0.5, got {0:?}")]
    BadScales(Vec<f64>),
    #[error("blob refers to tow {0}, which the layout does not contain")]
    UnknownTow(usize),
    #[error("box file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub tow_index: usize,
    /// Position in the signal.
    pub index: usize,
    /// Image column of the window centre at `index`.
    pub center_x: f64,
    pub sigma: f64,
    pub response: f64,
}

impl Blob {
    pub fn radius(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.sigma
    }
}

/// Axis-aligned box in pixel coordinates. Predicted boxes carry the blob's
/// scale and response, ground-truth boxes a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub tow: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl DefectBox {
    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

#[derive(Serialize, Deserialize)]
struct BoxFile {
    boxes: Vec<DefectBox>,
}

pub fn boxes_to_json(boxes: &[DefectBox]) -> String {
    serde_json::to_string_pretty(&BoxFile {
        boxes: boxes.to_vec(),
    })
    .expect("boxes serialize")
}

pub fn boxes_from_json(text: &str) -> Result<Vec<DefectBox>, LocalizeError> {
    serde_json::from_str::<BoxFile>(text)
        .map(|f| f.boxes)
        .map_err(|e| LocalizeError::Format(e.to_string()))
}

pub fn save_boxes(boxes: &[DefectBox], path: impl AsRef<Path>) -> Result<(), LocalizeError> {
    let path = path.as_ref();
    fs::write(path, boxes_to_json(boxes))
        .map_err(|e| LocalizeError::Format(format!("{}: {e}", path.display())))
}

pub fn load_boxes(path: impl AsRef<Path>) -> Result<Vec<DefectBox>, LocalizeError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| LocalizeError::Format(format!("{}: {e}", path.display())))?;
    boxes_from_json(&text)
}

fn check_scales(sigmas: &[f64]) -> Result<(), LocalizeError> {
    let ascending = sigmas.windows(2).all(|p| p[0] < p[1]);
    if sigmas.is_empty() || !ascending || sigmas.iter().any(|&s| !(s >= 0.5 && s.is_finite())) {
        return Err(LocalizeError::BadScales(sigmas.to_vec()));
    }
    Ok(())
}

/// Sampled Gaussian truncated at 4σ and normalized to unit sum.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// `-σ²`-scaled DoG taps for one scale: the wide minus the narrow
/// Gaussian, both zero-padded to the wider support.
fn dog_kernel(sigma: f64) -> Vec<f64> {
    // L(σ√κ) - L(σ/√κ) ≈ ½ σ² (κ - 1/κ) L''
    let norm = -2.0 / (KAPPA - 1.0 / KAPPA);
    let wide = gaussian_kernel(sigma * KAPPA.sqrt());
    let narrow = gaussian_kernel(sigma / KAPPA.sqrt());
    let pad = (wide.len() - narrow.len()) / 2;
    wide.iter()
        .enumerate()
        .map(|(i, w)| {
            let n = i
                .checked_sub(pad)
                .and_then(|j| narrow.get(j))
                .copied()
                .unwrap_or(0.0);
            norm * (w - n)
        })
        .collect()
}

/// `g[s][x]` for every scale in `sigmas`, edges replicated. Bumps give
/// positive responses. Taps act on differences from the centre sample, so
/// a constant signal yields exactly zero.
pub fn scale_space_response(
    signal: &[f64],
    sigmas: &[f64],
) -> Result<Vec<Vec<f64>>, LocalizeError> {
    if signal.len() < 3 {
        return Err(LocalizeError::SignalTooShort(signal.len()));
    }
    check_scales(sigmas)?;
    let last = signal.len() as isize - 1;
    Ok(sigmas
        .iter()
        .map(|&s| {
            let k = dog_kernel(s);
            let r = (k.len() / 2) as isize;
            (0..=last)
                .map(|i| {
                    let c = signal[i as usize];
                    k.iter()
                        .enumerate()
                        .map(|(j, t)| {
                            t * (signal[(i + j as isize - r).clamp(0, last) as usize] - c)
                        })
                        .sum()
                })
                .collect()
        })
        .collect())
}

/// Strict local maximum in the 3×3 scale/position neighbourhood. Ties are
/// won by the earliest cell so plateaus yield one candidate.
fn is_peak(g: &[Vec<f64>], s: usize, x: usize) -> bool {
    let v = g[s][x];
    for ds in -1isize..=1 {
        for dx in -1isize..=1 {
            if ds == 0 && dx == 0 {
                continue;
            }
            let (ns, nx) = (s as isize + ds, x as isize + dx);
            if ns < 0 || nx < 0 || ns as usize >= g.len() || nx as usize >= g[0].len() {
                continue;
            }
            let n = g[ns as usize][nx as usize];
            let earlier = (ds, dx) < (0, 0);
            if n > v || (earlier && n == v) {
                return false;
            }
        }
    }
    true
}

/// Peak scale refined by a parabola through the responses at the
/// neighbouring scales, fitted in log σ and clamped to the ladder.
fn refine_sigma(g: &[Vec<f64>], sigmas: &[f64], s: usize, x: usize) -> f64 {
    if s == 0 || s + 1 >= sigmas.len() {
        return sigmas[s];
    }
    let (l0, l1, l2) = (sigmas[s - 1].ln(), sigmas[s].ln(), sigmas[s + 1].ln());
    let (y0, y1, y2) = (g[s - 1][x], g[s][x], g[s + 1][x]);
    // vertex of the interpolating parabola on a non-uniform grid
    let num = (l1 - l0).powi(2) * (y1 - y2) - (l1 - l2).powi(2) * (y1 - y0);
    let den = (l1 - l0) * (y1 - y2) - (l1 - l2) * (y1 - y0);
    if den == 0.0 {
        return sigmas[s];
    }
    (l1 - 0.5 * num / den).clamp(l0, l2).exp()
}

/// Blobs above `response_floor`, overlapping ones suppressed in favour of
/// the stronger, sorted by position. `center_x` is the signal index and
/// `sigma` is refined between ladder steps.
pub fn detect_blobs(
    signal: &[f64],
    sigmas: &[f64],
    response_floor: f64,
) -> Result<Vec<Blob>, LocalizeError> {
    let g = scale_space_response(signal, sigmas)?;
    let mut candidates = Vec::new();
    for (s, row) in g.iter().enumerate() {
        for (x, &r) in row.iter().enumerate() {
            if r > response_floor && is_peak(&g, s, x) {
                candidates.push(Blob {
                    tow_index: 0,
                    index: x,
                    center_x: x as f64,
                    sigma: refine_sigma(&g, sigmas, s, x),
                    response: r,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.index.cmp(&b.index))
    });
    let mut kept: Vec<Blob> = Vec::new();
    for c in candidates {
        let clash = kept
            .iter()
            .any(|k| (k.index as f64 - c.index as f64).abs() < k.sigma.max(c.sigma));
        if !clash {
            kept.push(c);
        }
    }
    kept.sort_by_key(|b| b.index);
    Ok(kept)
}

/// Blobs on every tow signal of an anomaly map, with image columns filled
/// in. Windows reach into the neighbouring tows, so a blob is dropped when
/// an adjacent tow holds a stronger one within the larger radius (in
/// pixels); the result is ordered by tow, then position.
pub fn detect_map_blobs(
    map: &AnomalyMap,
    sigmas: &[f64],
    response_floor: f64,
) -> Result<Vec<Blob>, LocalizeError> {
    let mut all = Vec::new();
    for tow in &map.tows {
        let signal: Vec<f64> = tow.points.iter().map(|p| p.score).collect();
        if signal.len() < 3 {
            continue;
        }
        for mut b in detect_blobs(&signal, sigmas, response_floor)? {
            b.tow_index = tow.tow_index;
            b.center_x = tow.points[b.index].center_x as f64;
            all.push(b);
        }
    }
    all.sort_by(|a, b| b.response.total_cmp(&a.response));
    let spacing = map.stride as f64;
    let mut kept: Vec<Blob> = Vec::new();
    for c in all {
        let shadowed = kept.iter().any(|k| {
            k.tow_index.abs_diff(c.tow_index) == 1
                && (k.center_x - c.center_x).abs() < k.radius().max(c.radius()) * spacing
        });
        if !shadowed {
            kept.push(c);
        }
    }
    kept.sort_by(|a, b| a.tow_index.cmp(&b.tow_index).then(a.index.cmp(&b.index)));
    Ok(kept)
}

/// Largest response any signal reaches, used to calibrate the floor on
/// defect-free data.
pub fn max_response(map: &AnomalyMap, sigmas: &[f64]) -> Result<f64, LocalizeError> {
    let mut best = 0.0f64;
    for tow in &map.tows {
        let signal: Vec<f64> = tow.points.iter().map(|p| p.score).collect();
        if signal.len() < 3 {
            continue;
        }
        for row in scale_space_response(&signal, sigmas)? {
            best = row.into_iter().fold(best, f64::max);
        }
    }
    Ok(best)
}

/// Detection floor: the larger of `fraction` × the 99th-percentile normal
/// score and `margin` × the strongest response seen on normal scans.
pub fn calibrate_floor(
    normal_p99: f64,
    fraction: f64,
    normal_max_response: f64,
    margin: f64,
) -> f64 {
    (fraction * normal_p99).max(margin * normal_max_response)
}

/// Boxes centred on each blob, `2·√2·σ·stride` wide and one tow high,
/// clipped to the image.
pub fn blobs_to_boxes(
    blobs: &[Blob],
    layout: &TowLayout,
    tow_width: usize,
    window: usize,
    stride: usize,
    image: (usize, usize),
) -> Result<Vec<DefectBox>, LocalizeError> {
    let (iw, ih) = (image.0 as f64, image.1 as f64);
    blobs
        .iter()
        .map(|b| {
            let line = layout
                .centerline(b.tow_index)
                .ok_or(LocalizeError::UnknownTow(b.tow_index))?;
            let cx = (b.index * stride + line.x_start + window / 2) as f64;
            let half = std::f64::consts::SQRT_2 * b.sigma * stride as f64;
            let top = line.row as f64 - (tow_width / 2) as f64;
            let (x0, x1) = ((cx - half).max(0.0), (cx + half).min(iw));
            let (y0, y1) = (top.max(0.0), (top + tow_width as f64).min(ih));
            Ok(DefectBox {
                x: x0,
                y: y0,
                w: (x1 - x0).max(1.0),
                h: (y1 - y0).max(1.0),
                tow: b.tow_index,
                sigma: Some(b.sigma),
                response: Some(b.response),
                label: None,
            })
        })
        .collect()
}

pub fn iou(a: &DefectBox, b: &DefectBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub predicted: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// Mean over ground-truth boxes, unmatched ones counting 0; `None` when
    /// there is no ground truth.
    pub mean_iou: Option<f64>,
    /// Best IoU reached by any prediction, per ground-truth box.
    pub per_ground_truth: Vec<f64>,
    pub assignments: Vec<Assignment>,
    pub unmatched_predictions: usize,
}

/// Greedy one-to-one matching by descending IoU.
pub fn match_and_score(predicted: &[DefectBox], ground_truth: &[DefectBox]) -> MatchReport {
    let mut pairs: Vec<Assignment> = Vec::new();
    for (p, pb) in predicted.iter().enumerate() {
        for (g, gb) in ground_truth.iter().enumerate() {
            let v = iou(pb, gb);
            if v > 0.0 {
                pairs.push(Assignment {
                    predicted: p,
                    ground_truth: g,
                    iou: v,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.ground_truth.cmp(&b.ground_truth))
            .then(a.predicted.cmp(&b.predicted))
    });
    let (mut used_p, mut used_g) = (
        vec![false; predicted.len()],
        vec![false; ground_truth.len()],
    );
    let mut assignments = Vec::new();
    for a in pairs {
        if !used_p[a.predicted] && !used_g[a.ground_truth] {
            used_p[a.predicted] = true;
            used_g[a.ground_truth] = true;
            assignments.push(a);
        }
    }
    let mut per = vec![0.0; ground_truth.len()];
    for a in &assignments {
        per[a.ground_truth] = a.iou;
    }
    let mean_iou = (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64);
    MatchReport {
        mean_iou,
        per_ground_truth: ground_truth
            .iter()
            .map(|g| predicted.iter().map(|p| iou(p, g)).fold(0.0, f64::max))
            .collect(),
        unmatched_predictions: used_p.iter().filter(|u| !**u).count(),
        assignments,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tows::estimate_centerlines;

    fn bump(len: usize, center: f64, std: f64) -> Vec<f64> {
        (0..len)
            .map(|i| (-(i as f64 - center).powi(2) / (2.0 * std * std)).exp())
            .collect()
    }

    fn bx(x: f64, y: f64, w: f64, h: f64) -> DefectBox {
        DefectBox {
            x,
            y,
            w,
            h,
            tow: 0,
            sigma: None,
            response: None,
            label: None,
        }
    }

    #[test]
    fn zero_signal_zero_response() {
        let g = scale_space_response(&[0.0; 50], &DEFAULT_SCALES).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_response_is_symmetric() {
        let mut s = vec![0.0; 81];
        s[40] = 1.0;
        for row in scale_space_response(&s, &DEFAULT_SCALES).unwrap() {
            for d in 1..40 {
                assert!((row[40 - d] - row[40 + d]).abs() < 1e-15);
            }
            assert!(row[40] > 0.0);
        }
    }

    #[test]
    fn response_tracks_scale_normalized_second_derivative() {
        // -σ² L''(0) for a unit-height Gaussian of std s is σ² s / (s² + σ²)^{3/2}
        let (s, sigma) = (5.0, 4.0);
        let g = scale_space_response(&bump(201, 100.0, s), &[sigma]).unwrap();
        let exact = sigma * sigma * s / (s * s + sigma * sigma).powf(1.5);
        assert!(
            (g[0][100] - exact).abs() < 0.02 * exact,
            "{} vs {exact}",
            g[0][100]
        );
    }

    #[test]
    fn short_signal_and_bad_scales() {
        assert_eq!(
            scale_space_response(&[1.0, 2.0], &[1.0]),
            Err(LocalizeError::SignalTooShort(2))
        );
        assert!(scale_space_response(&[0.0; 10], &[2.0, 1.0]).is_err());
        assert!(scale_space_response(&[0.0; 10], &[0.3]).is_err());
    }

    #[test]
    fn flat_signal_has_no_blobs() {
        assert!(detect_blobs(&[0.7; 64], &DEFAULT_SCALES, 0.0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn two_bumps_two_blobs() {
        let s: Vec<f64> = bump(128, 30.0, 4.0)
            .iter()
            .zip(bump(128, 80.0, 4.0))
            .map(|(a, b)| a + b)
            .collect();
        let blobs = detect_blobs(&s, &DEFAULT_SCALES, 0.05).unwrap();
        assert_eq!(blobs.len(), 2, "{blobs:?}");
        assert!(blobs[0].index.abs_diff(30) <= 2 && blobs[1].index.abs_diff(80) <= 2);
    }

    #[test]
    fn calibrated_floor_rejects_isolated_sample() {
        let mut s = vec![0.0; 64];
        s[32] = 1.0;
        let peak = scale_space_response(&s, &DEFAULT_SCALES)
            .unwrap()
            .into_iter()
            .flatten()
            .fold(0.0, f64::max);
        assert!(!detect_blobs(&s, &DEFAULT_SCALES, 0.0).unwrap().is_empty());
        assert!(detect_blobs(&s, &DEFAULT_SCALES, peak * 1.01)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn box_arithmetic() {
        let layout = estimate_centerlines(&[29, 51], (0, 256)).unwrap();
        assert_eq!(layout.centerlines[0].row, 40);
        let blob = Blob {
            tow_index: 0,
            index: 10,
            center_x: 96.0,
            sigma: 2.0,
            response: 1.0,
        };
        let b = &blobs_to_boxes(&[blob], &layout, 21, 32, 8, (256, 256)).unwrap()[0];
        assert!((b.x + b.w / 2.0 - 96.0).abs() < 1e-12);
        assert!((b.w - 45.254833995939045).abs() < 1e-9);
        assert_eq!((b.y, b.y + b.h - 1.0), (30.0, 50.0));
    }

    #[test]
    fn boxes_clip_at_right_edge() {
        let layout = estimate_centerlines(&[29, 51], (0, 256)).unwrap();
        let blob = Blob {
            tow_index: 0,
            index: 29,
            center_x: 248.0,
            sigma: 3.0,
            response: 1.0,
        };
        let b = &blobs_to_boxes(&[blob], &layout, 21, 32, 8, (256, 256)).unwrap()[0];
        assert_eq!(b.x + b.w, 256.0);
        assert!(b.w < 2.0 * std::f64::consts::SQRT_2 * 3.0 * 8.0);
        let stray = Blob {
            tow_index: 3,
            ..blob
        };
        assert_eq!(
            blobs_to_boxes(&[stray], &layout, 21, 32, 8, (256, 256)),
            Err(LocalizeError::UnknownTow(3))
        );
    }

    #[test]
    fn iou_hand_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 0.0, 5.0, 5.0)), 0.0);
        assert!((iou(&a, &bx(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matching_edge_cases() {
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0), bx(50.0, 0.0, 10.0, 10.0)];
        assert_eq!(match_and_score(&gt, &gt).mean_iou, Some(1.0));
        assert_eq!(match_and_score(&[], &gt).mean_iou, Some(0.0));
        assert_eq!(match_and_score(&gt, &[]).mean_iou, None);
        assert_eq!(match_and_score(&gt, &[]).unmatched_predictions, 2);
    }

    #[test]
    fn box_json_schema() {
        let mut b = bx(1.0, 2.0, 3.0, 4.0);
        b.label = Some("gap".into());
        let text = boxes_to_json(&[b.clone()]);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["boxes"][0]["label"], "gap");
        assert!(v["boxes"][0].get("sigma").is_none());
        assert_eq!(boxes_from_json(&text).unwrap(), vec![b]);
    }
}
