//! Strided square windows along tow centerlines.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth::{DepthMap, DepthState};
use crate::tows::TowLayout;

pub const DEFAULT_WINDOW: usize = 32;
pub const DEFAULT_STRIDE: usize = 8;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("expected a normalized depth map")]
    NotNormalized,
    #[error("window {window} exceeds image {width}x{height}")]
    WindowTooLarge {
        window: usize,
        width: usize,
        height: usize,
    },
    #[error("window size must be even and positive, got {0}")]
    BadWindow(usize),
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("layout has no centerlines")]
    EmptyLayout,
    #[error("holdout fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("sample set manifest: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleLabel {
    Unlabeled,
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// Row-major `window × window` values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub center_x: usize,
    pub center_y: usize,
    pub tow_index: usize,
    pub label: SampleLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<WindowSample>,
    pub source_id: String,
    pub window: usize,
    pub stride: usize,
}

impl SampleSet {
    pub fn empty(source_id: impl Into<String>, window: usize, stride: usize) -> Self {
        Self {
            samples: Vec::new(),
            source_id: source_id.into(),
            window,
            stride,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Concatenates sets sharing the same window size.
    pub fn concat(source_id: impl Into<String>, sets: &[SampleSet]) -> Result<Self, SampleError> {
        let first = sets
            .first()
            .ok_or_else(|| SampleError::Manifest("no sample sets to concatenate".into()))?;
        let mut out = Self::empty(source_id, first.window, first.stride);
        for s in sets {
            if s.window != first.window {
                return Err(SampleError::Manifest(format!(
                    "window mismatch: {} vs {}",
                    s.window, first.window
                )));
            }
            out.samples.extend(s.samples.iter().cloned());
        }
        Ok(out)
    }

    /// All pixel data, samples in order, as one contiguous buffer.
    pub fn flat_pixels(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.samples.len() * self.window * self.window);
        for s in &self.samples {
            out.extend_from_slice(&s.pixels);
        }
        out
    }

    fn blob_path(manifest: &Path) -> PathBuf {
        manifest.with_extension("f32")
    }

    /// Writes `<path>` (JSON manifest) and a sibling `.f32` pixel blob.
    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<(), SampleError> {
        let manifest_path = manifest_path.as_ref();
        let blob_path = Self::blob_path(manifest_path);
        let manifest = Manifest {
            source_id: self.source_id.clone(),
            window: self.window,
            stride: self.stride,
            blob: blob_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            samples: self
                .samples
                .iter()
                .map(|s| ManifestEntry {
                    center_x: s.center_x,
                    center_y: s.center_y,
                    tow_index: s.tow_index,
                    label: s.label,
                })
                .collect(),
        };
        let mut blob = Vec::with_capacity(self.samples.len() * self.window * self.window * 4);
        for s in &self.samples {
            for v in &s.pixels {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| SampleError::Manifest(e.to_string()))?;
        write(manifest_path, json.as_bytes())?;
        write(&blob_path, &blob)
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, SampleError> {
        let manifest_path = manifest_path.as_ref();
        let text = read(manifest_path)?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| SampleError::Manifest(e.to_string()))?;
        let blob_path = manifest_path.with_file_name(&manifest.blob);
        let blob = read(&blob_path)?;
        let per = manifest.window * manifest.window;
        let expected = manifest.samples.len() * per * 4;
        if blob.len() != expected {
            return Err(SampleError::Manifest(format!(
                "pixel blob has {} bytes, manifest implies {expected}",
                blob.len()
            )));
        }
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let samples = manifest
            .samples
            .iter()
            .zip(values.chunks_exact(per.max(1)))
            .map(|(e, px)| WindowSample {
                pixels: px.to_vec(),
                center_x: e.center_x,
                center_y: e.center_y,
                tow_index: e.tow_index,
                label: e.label,
            })
            .collect();
        Ok(Self {
            samples,
            source_id: manifest.source_id,
            window: manifest.window,
            stride: manifest.stride,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    source_id: String,
    window: usize,
    stride: usize,
    blob: String,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    center_x: usize,
    center_y: usize,
    tow_index: usize,
    label: SampleLabel,
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), SampleError> {
    fs::write(path, bytes).map_err(|source| SampleError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read(path: &Path) -> Result<Vec<u8>, SampleError> {
    fs::read(path).map_err(|source| SampleError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Window centre columns along one centerline: the first window is flush
/// with `x_start`, the last one ends at or before `x_end`.
pub fn window_centers(x_start: usize, x_end: usize, window: usize, stride: usize) -> Vec<usize> {
    let b = window / 2;
    let mut out = Vec::new();
    let mut cx = x_start + b;
    while cx + b <= x_end {
        out.push(cx);
        cx += stride;
    }
    out
}

/// Top-left corner of a window centred at `center`, shifted inward when it
/// would cross the image border.
fn window_origin(center: usize, window: usize, extent: usize) -> usize {
    let b = window / 2;
    center.saturating_sub(b).min(extent - window)
}

pub fn extract_windows(
    map: &DepthMap,
    layout: &TowLayout,
    window: usize,
    stride: usize,
) -> Result<SampleSet, SampleError> {
    extract_windows_from(map, layout, window, stride, "")
}

pub fn extract_windows_from(
    map: &DepthMap,
    layout: &TowLayout,
    window: usize,
    stride: usize,
    source_id: &str,
) -> Result<SampleSet, SampleError> {
    if map.state() != DepthState::Normalized {
        return Err(SampleError::NotNormalized);
    }
    if window == 0 || !window.is_multiple_of(2) {
        return Err(SampleError::BadWindow(window));
    }
    if stride == 0 {
        return Err(SampleError::ZeroStride);
    }
    let (width, height) = (map.width(), map.height());
    if window > width || window > height {
        return Err(SampleError::WindowTooLarge {
            window,
            width,
            height,
        });
    }
    if layout.centerlines.is_empty() {
        return Err(SampleError::EmptyLayout);
    }
    let b = window / 2;
    let mut set = SampleSet::empty(source_id, window, stride);
    for line in &layout.centerlines {
        let x_end = line.x_end.min(width);
        let y0 = window_origin(line.row, window, height);
        for cx in window_centers(line.x_start, x_end, window, stride) {
            let x0 = cx - b;
            set.samples.push(WindowSample {
                pixels: map.crop_f32(x0, y0, window, window),
                center_x: cx,
                center_y: y0 + b,
                tow_index: line.tow_index,
                label: SampleLabel::Unlabeled,
            });
        }
    }
    Ok(set)
}

/// Seeded shuffle followed by a split; returns `(train, holdout)`.
pub fn split_train_holdout(
    set: &SampleSet,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(SampleSet, SampleSet), SampleError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(SampleError::BadFraction(holdout_fraction));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = (set.len() as f64 * holdout_fraction).round() as usize;
    let pick = |idx: &[usize], suffix: &str| SampleSet {
        samples: idx.iter().map(|&i| set.samples[i].clone()).collect(),
        source_id: format!("{}{suffix}", set.source_id),
        window: set.window,
        stride: set.stride,
    };
    let (hold, train) = order.split_at(n_hold);
    Ok((pick(train, ":train"), pick(hold, ":holdout")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tows::{estimate_centerlines, Centerline};
    use std::collections::HashSet;

    fn ramp_map(width: usize, height: usize) -> DepthMap {
        let n = width * height;
        let px = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        DepthMap::new(width, height, px, DepthState::Normalized).unwrap()
    }

    fn single_line(row: usize, x_start: usize, x_end: usize) -> TowLayout {
        TowLayout {
            horizontal_edges: vec![row - 10, row + 10],
            vertical_bounds: (x_start, x_end),
            centerlines: vec![Centerline {
                row,
                x_start,
                x_end,
                tow_index: 0,
            }],
        }
    }

    #[test]
    fn centers_follow_arithmetic_progression() {
        let c = window_centers(0, 96, 32, 8);
        assert_eq!(c, vec![16, 24, 32, 40, 48, 56, 64, 72, 80]);
    }

    #[test]
    fn short_centerline_yields_nothing() {
        assert!(window_centers(10, 40, 32, 8).is_empty());
        let set = extract_windows(&ramp_map(100, 64), &single_line(32, 10, 40), 32, 8).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn windows_copy_the_right_pixels() {
        let map = ramp_map(100, 64);
        let set = extract_windows(&map, &single_line(32, 0, 96), 32, 8).unwrap();
        assert_eq!(set.len(), 9);
        let s = &set.samples[2];
        assert_eq!((s.center_x, s.center_y), (32, 32));
        // top-left of the window is (center - 16, center - 16)
        assert_eq!(s.pixels[0], map.get(16, 16) as f32);
        assert_eq!(s.pixels[32 * 32 - 1], map.get(47, 47) as f32);
    }

    #[test]
    fn border_windows_are_clamped_inward() {
        let map = ramp_map(100, 64);
        let set = extract_windows(&map, &single_line(10, 0, 96), 32, 8).unwrap();
        assert!(set.samples.iter().all(|s| s.center_y == 16));
        let set = extract_windows(&map, &single_line(60, 0, 96), 32, 8).unwrap();
        assert!(set.samples.iter().all(|s| s.center_y == 48));
    }

    #[test]
    fn errors() {
        let map = ramp_map(20, 20);
        assert!(matches!(
            extract_windows(&map, &single_line(10, 0, 20), 32, 8),
            Err(SampleError::WindowTooLarge { .. })
        ));
        let empty = estimate_centerlines(&[2, 8], (0, 10)).map(|mut l| {
            l.centerlines.clear();
            l
        });
        assert!(matches!(
            extract_windows(&map, &empty.unwrap(), 8, 4),
            Err(SampleError::EmptyLayout)
        ));
        let raw = DepthMap::filled(40, 40, 1.0).unwrap();
        assert!(matches!(
            extract_windows(&raw, &single_line(20, 0, 40), 8, 4),
            Err(SampleError::NotNormalized)
        ));
    }

    #[test]
    fn adjacent_windows_overlap_by_window_minus_stride() {
        let c = window_centers(3, 200, 32, 8);
        for pair in c.windows(2) {
            let (a_end, b_start) = (pair[0] + 16, pair[1] - 16);
            assert_eq!(a_end - b_start, 24);
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let map = ramp_map(840, 40);
        let set = extract_windows(&map, &single_line(20, 0, 832), 32, 8).unwrap();
        assert_eq!(set.len(), 101);
        let mut set = set;
        set.samples.truncate(100);
        let (train, hold) = split_train_holdout(&set, 0.2, 7).unwrap();
        assert_eq!((train.len(), hold.len()), (80, 20));
        let key = |s: &WindowSample| s.center_x;
        let a: HashSet<_> = train.samples.iter().map(key).collect();
        let b: HashSet<_> = hold.samples.iter().map(key).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 100);

        let (train2, hold2) = split_train_holdout(&set, 0.2, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(hold, hold2);

        let (train3, hold3) = split_train_holdout(&set, 0.2, 8).unwrap();
        assert_ne!(
            train.samples.iter().map(key).collect::<Vec<_>>(),
            train3.samples.iter().map(key).collect::<Vec<_>>()
        );
        let c: HashSet<_> = train3.samples.iter().map(key).collect();
        let d: HashSet<_> = hold3.samples.iter().map(key).collect();
        assert!(c.is_disjoint(&d));
        assert_eq!(c.union(&d).count(), 100);
    }

    #[test]
    fn bad_fraction() {
        let set = SampleSet::empty("x", 32, 8);
        assert!(split_train_holdout(&set, 0.0, 1).is_err());
        assert!(split_train_holdout(&set, 1.0, 1).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = ramp_map(100, 64);
        let mut set = extract_windows_from(&map, &single_line(32, 0, 96), 32, 8, "scan-7").unwrap();
        set.samples[3].label = SampleLabel::Abnormal;
        let path = dir.path().join("set.json");
        set.save(&path).unwrap();
        assert!(dir.path().join("set.f32").exists());
        assert_eq!(SampleSet::load(&path).unwrap(), set);
    }
}
