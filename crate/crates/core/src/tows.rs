//! Tow boundary detection: Sobel edges, an axis-aligned Hough accumulator and
//! centerline estimation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth::{DepthMap, DepthState};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("expected a normalized depth map")]
    NotNormalized,
    #[error("found {found} {orientation:?} lines above the vote floor, expected {expected}")]
    FewerLinesThanExpected {
        orientation: Orientation,
        found: usize,
        expected: usize,
    },
    #[error("need at least two horizontal edges, got {0}")]
    TooFewEdges(usize),
    #[error("invalid vertical bounds ({0}, {1})")]
    InvalidBounds(usize, usize),
    #[error("expected_count must be at least 1")]
    ZeroExpected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    /// Lines of constant row.
    Horizontal,
    /// Lines of constant column.
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Sobel gradient magnitude and the thresholded edge mask.
#[derive(Debug, Clone)]
pub struct EdgeMap {
    pub magnitude: Vec<f64>,
    pub threshold: f64,
    pub mask: BinaryMask,
}

/// Sobel 3×3 gradient magnitude; edges are pixels above mean + 2·stddev.
pub fn edge_map(map: &DepthMap) -> Result<EdgeMap, GeometryError> {
    if map.state() != DepthState::Normalized {
        return Err(GeometryError::NotNormalized);
    }
    let (w, h) = (map.width(), map.height());
    let mut magnitude = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| map.get_clamped(x + dx, y + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            magnitude.push((gx * gx + gy * gy).sqrt());
        }
    }
    let n = magnitude.len() as f64;
    let mean = magnitude.iter().sum::<f64>() / n;
    let var = magnitude
        .iter()
        .map(|m| (m - mean) * (m - mean))
        .sum::<f64>()
        / n;
    let threshold = mean + 2.0 * var.sqrt();
    let mut mask = BinaryMask::new(w, h);
    for (bit, &m) in mask.bits.iter_mut().zip(&magnitude) {
        // strict comparison keeps constant images edge-free
        *bit = m > threshold;
    }
    Ok(EdgeMap {
        magnitude,
        threshold,
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoughConfig {
    /// Peaks closer than this many bins to a stronger peak are suppressed.
    pub suppression_radius: usize,
    /// Minimum votes, as a fraction of a full-length line.
    pub vote_floor: f64,
}

impl Default for HoughConfig {
    fn default() -> Self {
        Self {
            suppression_radius: 3,
            vote_floor: 0.3,
        }
    }
}

/// Vote accumulator restricted to θ ∈ {0°, 90°} with 1-pixel ρ bins.
pub fn hough_accumulator(mask: &BinaryMask, orientation: Orientation) -> Vec<u32> {
    match orientation {
        Orientation::Horizontal => (0..mask.height)
            .map(|y| (0..mask.width).filter(|&x| mask.get(x, y)).count() as u32)
            .collect(),
        Orientation::Vertical => {
            let mut acc = vec![0u32; mask.width];
            for y in 0..mask.height {
                for (x, slot) in acc.iter_mut().enumerate() {
                    *slot += mask.get(x, y) as u32;
                }
            }
            acc
        }
    }
}

/// Detects up to `expected_count` axis-aligned lines, returned in ascending
/// order of position.
pub fn hough_lines(
    mask: &BinaryMask,
    orientation: Orientation,
    expected_count: usize,
) -> Result<Vec<usize>, GeometryError> {
    hough_lines_with(mask, orientation, expected_count, &HoughConfig::default())
}

pub fn hough_lines_with(
    mask: &BinaryMask,
    orientation: Orientation,
    expected_count: usize,
    config: &HoughConfig,
) -> Result<Vec<usize>, GeometryError> {
    if expected_count == 0 {
        return Err(GeometryError::ZeroExpected);
    }
    let acc = hough_accumulator(mask, orientation);
    let full_line = match orientation {
        Orientation::Horizontal => mask.width,
        Orientation::Vertical => mask.height,
    };
    let floor = config.vote_floor * full_line as f64;
    let radius = config.suppression_radius;
    let n = acc.len();
    let above = |i: usize| acc[i] as f64 >= floor;

    // Peaks are ranked on a Gaussian-smoothed accumulator so that the paired
    // responses a Sobel kernel leaves on either side of a narrow groove merge
    // into a single peak.
    let kernel: Vec<f64> = (0..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * 1.5 * 1.5)).exp())
        .collect();
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n - 1);
            (lo..=hi)
                .map(|j| kernel[i.abs_diff(j)] * acc[j] as f64)
                .sum()
        })
        .collect();
    let supported = |i: usize| {
        let lo = i.saturating_sub(2);
        let hi = (i + 2).min(n - 1);
        (lo..=hi).any(above)
    };

    let mut order: Vec<usize> = (0..n).filter(|&i| supported(i)).collect();
    order.sort_by(|&a, &b| smooth[b].total_cmp(&smooth[a]).then(a.cmp(&b)));

    let mut peaks: Vec<usize> = Vec::with_capacity(expected_count);
    for i in order {
        if peaks.len() == expected_count {
            break;
        }
        if peaks.iter().all(|&p| p.abs_diff(i) > radius) {
            peaks.push(i);
        }
    }
    if peaks.len() < expected_count {
        return Err(GeometryError::FewerLinesThanExpected {
            orientation,
            found: peaks.len(),
            expected: expected_count,
        });
    }

    // Refine each peak to the vote-weighted centroid of above-floor bins in
    // its suppression window, re-centring until the position is stable.
    let mut lines: Vec<usize> = peaks
        .into_iter()
        .map(|peak| {
            let mut pos = peak;
            for _ in 0..4 {
                let lo = pos.saturating_sub(radius);
                let hi = (pos + radius).min(n - 1);
                let (mut wsum, mut isum) = (0u64, 0u64);
                for j in (lo..=hi).filter(|&j| above(j)) {
                    wsum += acc[j] as u64;
                    isum += acc[j] as u64 * j as u64;
                }
                if wsum == 0 {
                    break;
                }
                // round half up: floor((2·isum + wsum) / (2·wsum))
                let next = ((2 * isum + wsum) / (2 * wsum)) as usize;
                if next == pos {
                    break;
                }
                pos = next;
            }
            pos
        })
        .collect();
    lines.sort_unstable();
    Ok(lines)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Centerline {
    pub row: usize,
    pub x_start: usize,
    pub x_end: usize,
    pub tow_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowLayout {
    pub horizontal_edges: Vec<usize>,
    /// `(left, right)` extent of the layup; `right` is exclusive for sampling.
    pub vertical_bounds: (usize, usize),
    pub centerlines: Vec<Centerline>,
}

impl TowLayout {
    pub fn centerline(&self, tow_index: usize) -> Option<&Centerline> {
        self.centerlines.iter().find(|c| c.tow_index == tow_index)
    }

    pub fn tow_count(&self) -> usize {
        self.centerlines.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Centerline of each tow is the rounded (half up) mean of its two bounding
/// edges, spanning the vertical bounds.
pub fn estimate_centerlines(
    horizontal_edges: &[usize],
    vertical_bounds: (usize, usize),
) -> Result<TowLayout, GeometryError> {
    if horizontal_edges.len() < 2 {
        return Err(GeometryError::TooFewEdges(horizontal_edges.len()));
    }
    let (left, right) = vertical_bounds;
    if left >= right {
        return Err(GeometryError::InvalidBounds(left, right));
    }
    let mut edges = horizontal_edges.to_vec();
    edges.sort_unstable();
    edges.dedup();
    if edges.len() < 2 {
        return Err(GeometryError::TooFewEdges(edges.len()));
    }
    let centerlines = edges
        .windows(2)
        .enumerate()
        .map(|(tow_index, pair)| Centerline {
            row: (pair[0] + pair[1]).div_ceil(2),
            x_start: left,
            x_end: right,
            tow_index,
        })
        .collect();
    Ok(TowLayout {
        horizontal_edges: edges,
        vertical_bounds,
        centerlines,
    })
}

/// Full tow detection on a normalized map with a known tow count.
pub fn detect_tows(map: &DepthMap, tow_count: usize) -> Result<TowLayout, GeometryError> {
    let edges = edge_map(map)?;
    let rows = hough_lines(&edges.mask, Orientation::Horizontal, tow_count + 1)?;
    let cols = hough_lines(&edges.mask, Orientation::Vertical, 2)?;
    estimate_centerlines(&rows, (cols[0], cols[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::DepthMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows_mask(width: usize, height: usize, rows: &[usize]) -> BinaryMask {
        let mut m = BinaryMask::new(width, height);
        for &r in rows {
            for x in 0..width {
                m.set(x, r, true);
            }
        }
        m
    }

    #[test]
    fn step_gradient_sits_on_the_step() {
        let (w, h) = (10, 6);
        let px: Vec<f64> = (0..w * h)
            .map(|i| if i % w >= 5 { 1.0 } else { 0.0 })
            .collect();
        let map = DepthMap::new(w, h, px, DepthState::Normalized).unwrap();
        let e = edge_map(&map).unwrap();
        let max = e.magnitude.iter().cloned().fold(0.0, f64::max);
        for y in 0..h {
            for x in 0..w {
                let m = e.magnitude[y * w + x];
                if x == 4 || x == 5 {
                    assert_eq!(m, max);
                } else {
                    assert_eq!(m, 0.0);
                }
            }
        }
    }

    #[test]
    fn constant_image_has_no_edges() {
        let map = DepthMap::new(8, 8, vec![0.0; 64], DepthState::Normalized).unwrap();
        assert_eq!(edge_map(&map).unwrap().mask.count(), 0);
    }

    #[test]
    fn raw_map_is_rejected() {
        let map = DepthMap::filled(4, 4, 1.0).unwrap();
        assert_eq!(edge_map(&map).unwrap_err(), GeometryError::NotNormalized);
    }

    #[test]
    fn ideal_rows_are_found_exactly() {
        let rows = [7, 19, 33, 50, 61];
        let m = rows_mask(80, 70, &rows);
        assert_eq!(hough_lines(&m, Orientation::Horizontal, 5).unwrap(), rows);
    }

    #[test]
    fn rows_survive_random_deletion() {
        let rows = [7, 19, 33, 50, 61];
        let mut m = rows_mask(80, 70, &rows);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for b in m.bits.iter_mut() {
            if *b && rng.gen_bool(0.2) {
                *b = false;
            }
        }
        // brute-force oracle: the five fullest rows
        let mut hist: Vec<(usize, usize)> = (0..70)
            .map(|y| ((0..80).filter(|&x| m.get(x, y)).count(), y))
            .collect();
        hist.sort_by(|a, b| b.cmp(a));
        let mut oracle: Vec<usize> = hist[..5].iter().map(|&(_, y)| y).collect();
        oracle.sort_unstable();
        assert_eq!(oracle, rows);
        assert_eq!(hough_lines(&m, Orientation::Horizontal, 5).unwrap(), rows);
    }

    #[test]
    fn empty_mask_reports_missing_lines() {
        let m = BinaryMask::new(20, 20);
        assert!(matches!(
            hough_lines(&m, Orientation::Horizontal, 2),
            Err(GeometryError::FewerLinesThanExpected {
                found: 0,
                expected: 2,
                ..
            })
        ));
    }

    #[test]
    fn vertical_lines() {
        let mut m = BinaryMask::new(50, 40);
        for y in 0..40 {
            m.set(4, y, true);
            m.set(44, y, true);
        }
        assert_eq!(
            hough_lines(&m, Orientation::Vertical, 2).unwrap(),
            vec![4, 44]
        );
    }

    #[test]
    fn twin_sobel_rows_merge_to_groove_centre() {
        // a 3-row trough at 20 leaves responses on rows 18, 19, 21, 22
        let m = rows_mask(60, 40, &[18, 19, 21, 22]);
        assert_eq!(
            hough_lines(&m, Orientation::Horizontal, 1).unwrap(),
            vec![20]
        );
    }

    #[test]
    fn centerlines_are_edge_means() {
        let l = estimate_centerlines(&[10, 30, 50], (5, 95)).unwrap();
        let rows: Vec<usize> = l.centerlines.iter().map(|c| c.row).collect();
        assert_eq!(rows, vec![20, 40]);
        assert!(l
            .centerlines
            .iter()
            .all(|c| c.x_start == 5 && c.x_end == 95));
        assert_eq!(l.centerlines[1].tow_index, 1);
    }

    #[test]
    fn centerline_rounds_half_up() {
        let l = estimate_centerlines(&[10, 31], (0, 10)).unwrap();
        assert_eq!(l.centerlines[0].row, 21);
    }

    #[test]
    fn too_few_edges() {
        assert_eq!(
            estimate_centerlines(&[10], (0, 10)).unwrap_err(),
            GeometryError::TooFewEdges(1)
        );
    }

    #[test]
    fn layout_json_schema() {
        let l = estimate_centerlines(&[10, 30], (5, 95)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&l.to_json()).unwrap();
        assert_eq!(v["horizontal_edges"], serde_json::json!([10, 30]));
        assert_eq!(v["vertical_bounds"], serde_json::json!([5, 95]));
        assert_eq!(
            v["centerlines"][0],
            serde_json::json!({"row": 20, "x_start": 5, "x_end": 95, "tow_index": 0})
        );
        assert_eq!(TowLayout::from_json(&l.to_json()).unwrap(), l);
    }

    proptest::proptest! {
        #[test]
        fn centerlines_shift_with_edges(
            mut edges in proptest::collection::vec(0usize..400, 2..10),
            d in 0usize..100,
        ) {
            edges.sort_unstable();
            edges.dedup();
            proptest::prop_assume!(edges.len() >= 2);
            let a = estimate_centerlines(&edges, (0, 50)).unwrap();
            let shifted: Vec<usize> = edges.iter().map(|e| e + d).collect();
            let b = estimate_centerlines(&shifted, (0, 50)).unwrap();
            for (ca, cb) in a.centerlines.iter().zip(&b.centerlines) {
                proptest::prop_assert_eq!(ca.row + d, cb.row);
            }
            for (c, pair) in a.centerlines.iter().zip(a.horizontal_edges.windows(2)) {
                proptest::prop_assert!(pair[0] < c.row && c.row < pair[1] || pair[1] - pair[0] == 1);
            }
        }

        #[test]
        fn sparse_noise_below_floor_does_not_move_lines(seed in 0u64..1000) {
            let rows = [8, 20, 33, 47, 60];
            let mut m = rows_mask(100, 70, &rows);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for y in 0..70 {
                if rows.contains(&y) { continue; }
                // at most 10 of 100 pixels per row, well under the 30% floor
                for _ in 0..rng.gen_range(0..=10) {
                    let x = rng.gen_range(0..100);
                    m.set(x, y, true);
                }
            }
            proptest::prop_assert_eq!(hough_lines(&m, Orientation::Horizontal, 5).unwrap(), rows.to_vec());
        }
    }
}
