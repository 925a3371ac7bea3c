//! Synthetic tape-laid depth maps with known tow geometry and injected
//! defects.
//!
//! A scan is a rectangle of horizontal tows on a background half a groove
//! lower. Grooves between tows are one row deep at `groove_depth` with
//! half-depth rows on either side, so the 3×3 median leaves a shallow
//! three-row trough. Heights are in relative units; the raw map stores
//! `30000 + 1000 · height`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth::{save_pgm, DepthError, DepthMap, DepthState};
use crate::localize::{save_boxes, DefectBox};
use crate::tows::{estimate_centerlines, TowLayout};

const RAW_BASE: f64 = 30000.0;
const RAW_SCALE: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("invalid defect #{index}: {reason}")]
    Defect { index: usize, reason: String },
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Gap,
    Overlap,
    Twist,
    ForeignObject,
}

impl DefectKind {
    pub const ALL: [DefectKind; 4] = [Self::Gap, Self::Overlap, Self::Twist, Self::ForeignObject];

    pub fn label(self) -> &'static str {
        match self {
            Self::Gap => "gap",
            Self::Overlap => "overlap",
            Self::Twist => "twist",
            Self::ForeignObject => "foreign_object",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub tow_index: usize,
    pub x_start: usize,
    pub x_extent: usize,
    /// Height change in relative units; a gap always drops to the groove depth.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub tow_count: usize,
    pub tow_width: usize,
    pub groove_depth: f64,
    pub surface_noise_std: f64,
    /// Fraction of pixels replaced by salt or pepper impulses.
    pub impulse_rate: f64,
    pub seed: u64,
    pub defects: Vec<DefectSpec>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            tow_count: 8,
            tow_width: 21,
            groove_depth: 1.0,
            surface_noise_std: 0.02,
            impulse_rate: 0.001,
            seed: 0,
            defects: Vec::new(),
        }
    }
}

/// Random placement drawn once per seed, independent of the defect list.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Frame {
    top_groove: usize,
    left: usize,
    right: usize,
}

impl SynthSpec {
    /// Rows from the first groove to the last one, inclusive.
    fn span(&self) -> usize {
        self.tow_count * (self.tow_width + 1) + 1
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.tow_count == 0 || self.tow_width < 3 {
            return bad(format!(
                "need at least one tow at least 3 px wide, got {} x {}",
                self.tow_count, self.tow_width
            ));
        }
        if self.span() > self.height {
            return bad(format!(
                "{} tows of width {} need {} rows, height is {}",
                self.tow_count,
                self.tow_width,
                self.span(),
                self.height
            ));
        }
        if self.width < 48 {
            return bad(format!("width {} is below the 48 px minimum", self.width));
        }
        for (name, v) in [
            ("groove_depth", self.groove_depth),
            ("surface_noise_std", self.surface_noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.impulse_rate) {
            return bad(format!(
                "impulse_rate must lie in [0, 1], got {}",
                self.impulse_rate
            ));
        }
        Ok(())
    }

    fn frame(&self) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let free = self.height - self.span();
        let top_groove = rng.gen_range(free * 3 / 10..=free * 7 / 10);
        let margin = (self.width / 64).max(1);
        let left = rng.gen_range(margin..=margin + 6);
        let right = self.width - 1 - rng.gen_range(margin..=margin + 6);
        Frame {
            top_groove,
            left,
            right,
        }
    }

    fn grooves(&self, frame: &Frame) -> Vec<usize> {
        (0..=self.tow_count)
            .map(|k| frame.top_groove + k * (self.tow_width + 1))
            .collect()
    }

    fn check_defect(&self, index: usize, d: &DefectSpec, frame: &Frame) -> Result<(), SynthError> {
        let fail = |reason: String| Err(SynthError::Defect { index, reason });
        if d.tow_index >= self.tow_count {
            return fail(format!("tow {} out of {}", d.tow_index, self.tow_count));
        }
        if d.x_extent < 4 {
            return fail(format!("extent {} is below 4 px", d.x_extent));
        }
        if d.x_start < frame.left || d.x_start + d.x_extent > frame.right + 1 {
            return fail(format!(
                "columns {}..{} leave the layup {}..={}",
                d.x_start,
                d.x_start + d.x_extent,
                frame.left,
                frame.right
            ));
        }
        if !(d.magnitude >= 0.0 && d.magnitude.is_finite()) {
            return fail(format!(
                "magnitude must be finite and non-negative, got {}",
                d.magnitude
            ));
        }
        Ok(())
    }

    /// Columns available for defects, `left..=right`.
    pub fn layup_columns(&self) -> (usize, usize) {
        let f = self.frame();
        (f.left, f.right)
    }
}

#[derive(Debug, Clone)]
pub struct Scan {
    pub map: DepthMap,
    pub layout: TowLayout,
    pub boxes: Vec<DefectBox>,
}

/// Renders one scan. Identical specs give bitwise identical output.
pub fn generate(spec: &SynthSpec) -> Result<Scan, SynthError> {
    spec.validate()?;
    let frame = spec.frame();
    for (i, d) in spec.defects.iter().enumerate() {
        spec.check_defect(i, d, &frame)?;
    }
    let (w, h) = (spec.width, spec.height);
    let gd = spec.groove_depth;
    let grooves = spec.grooves(&frame);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // surface shape: bow, per-tow offsets and striation
    let bow_x = rng.gen_range(-0.8..0.8) * gd;
    let bow_y = rng.gen_range(-0.8..0.8) * gd;
    let tows: Vec<(f64, f64, f64, f64)> = (0..spec.tow_count)
        .map(|_| {
            (
                rng.gen_range(-0.08..0.08) * gd,
                rng.gen_range(0.01..0.03) * gd,
                rng.gen_range(6.0..14.0),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let tow_of = |y: usize| -> Option<usize> {
        let g0 = grooves[0];
        (y > g0 && y < grooves[spec.tow_count]).then(|| (y - g0 - 1) / (spec.tow_width + 1))
    };
    let profile = |y: usize| -> f64 {
        let d = grooves
            .iter()
            .map(|&g| g.abs_diff(y))
            .min()
            .unwrap_or(usize::MAX);
        match d {
            0 => -gd,
            1 => -gd / 2.0,
            _ => 0.0,
        }
    };
    let level = |x: usize, y: usize| -> f64 {
        let u = 2.0 * x as f64 / w as f64 - 1.0;
        let v = 2.0 * y as f64 / h as f64 - 1.0;
        bow_x * u * u + bow_y * v * v + tow_of(y).map_or(0.0, |k| tows[k].0)
    };

    let mut height = vec![0.0; w * h];
    for y in 0..h {
        let p = profile(y);
        let tow = tow_of(y).map(|k| tows[k]);
        for x in 0..w {
            let mut z = level(x, y);
            if x < frame.left || x > frame.right {
                z -= gd / 2.0;
            } else {
                z += p;
                if let Some((_, amp, period, phase)) = tow {
                    z += amp * (2.0 * PI * x as f64 / period + phase).sin();
                }
            }
            height[y * w + x] = z;
        }
    }

    let noise =
        Normal::new(0.0, spec.surface_noise_std).map_err(|e| SynthError::Spec(e.to_string()))?;
    let noise: Vec<f64> = (0..w * h).map(|_| noise.sample(&mut rng)).collect();
    let impulses: Vec<(usize, f64)> = (0..w * h)
        .filter_map(|i| {
            let hit = rng.gen_bool(spec.impulse_rate);
            let salt = rng.gen_bool(0.5);
            hit.then_some((i, if salt { 65535.0 } else { 0.0 }))
        })
        .collect();

    let mut boxes = Vec::with_capacity(spec.defects.len());
    for d in &spec.defects {
        let top = grooves[d.tow_index] + 1;
        let (tw, ext) = (spec.tow_width, d.x_extent);
        for y in top..top + tw {
            for x in d.x_start..d.x_start + ext {
                let u = (x - d.x_start) as f64 / (ext - 1) as f64;
                let v = (y - top) as f64 / (tw - 1) as f64;
                let z = &mut height[y * w + x];
                match d.kind {
                    DefectKind::Gap => *z = level(x, y) - gd,
                    DefectKind::Overlap => *z += d.magnitude,
                    DefectKind::Twist => {
                        *z +=
                            d.magnitude * (PI * u).sin() * (0.5 + 0.5 * (2.0 * PI * (v - u)).cos())
                    }
                    DefectKind::ForeignObject => {
                        let (du, dv) = ((u - 0.5) / 0.25, (v - 0.5) / 0.25);
                        *z += d.magnitude * (-0.5 * (du * du + dv * dv)).exp()
                    }
                }
            }
        }
        boxes.push(DefectBox {
            x: d.x_start as f64,
            y: top as f64,
            w: ext as f64,
            h: tw as f64,
            tow: d.tow_index,
            sigma: None,
            response: None,
            label: Some(d.kind.label().into()),
        });
    }

    let mut raw: Vec<f64> = height
        .iter()
        .zip(&noise)
        .map(|(z, n)| (RAW_BASE + RAW_SCALE * (z + n)).clamp(0.0, 65535.0))
        .collect();
    for (i, v) in impulses {
        raw[i] = v;
    }
    let map = DepthMap::new(w, h, raw, DepthState::Raw)?;
    let layout = estimate_centerlines(&grooves, (frame.left, frame.right + 1))
        .map_err(|e| SynthError::Spec(e.to_string()))?;
    Ok(Scan { map, layout, boxes })
}

/// `count` non-overlapping defects cycling through every kind, on distinct
/// tows where possible.
pub fn random_defects(spec: &SynthSpec, count: usize, seed: u64) -> Vec<DefectSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (left, right) = spec.layup_columns();
    let mut tows: Vec<usize> = (0..spec.tow_count).collect();
    tows.shuffle(&mut rng);
    let gd = spec.groove_depth;
    (0..count)
        .map(|i| {
            let kind = DefectKind::ALL[i % 4];
            let x_extent = rng.gen_range(32..=64).min(right + 1 - left);
            let x_start = rng.gen_range(left..=right + 1 - x_extent);
            let magnitude = match kind {
                DefectKind::Gap => gd,
                DefectKind::Overlap => rng.gen_range(0.4..0.6) * gd,
                DefectKind::Twist => rng.gen_range(0.6..0.9) * gd,
                DefectKind::ForeignObject => rng.gen_range(0.8..1.2) * gd,
            };
            DefectSpec {
                kind,
                tow_index: tows[i % tows.len()],
                x_start,
                x_extent,
                magnitude,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub split: String,
    pub depth: PathBuf,
    pub layout: PathBuf,
    pub boxes: PathBuf,
    pub defects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub base: SynthSpec,
    pub scans: Vec<CorpusEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| SynthError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| SynthError::Io(format!("{}: {e}", path.display())))
    }

    pub fn split(&self, name: &str) -> impl Iterator<Item = &CorpusEntry> {
        let name = name.to_string();
        self.scans.iter().filter(move |e| e.split == name)
    }
}

/// Specs for a corpus of defect-free training scans followed by test scans
/// sharing `defect_count` defects between them.
pub fn corpus_specs(
    base: &SynthSpec,
    normal: usize,
    test: usize,
    defect_count: usize,
) -> Vec<(String, SynthSpec)> {
    let mut out = Vec::with_capacity(normal + test);
    for i in 0..normal {
        let spec = SynthSpec {
            seed: base.seed.wrapping_mul(1000).wrapping_add(i as u64),
            defects: Vec::new(),
            ..base.clone()
        };
        out.push((format!("normal_{i:03}"), spec));
    }
    for j in 0..test {
        let mut spec = SynthSpec {
            seed: base.seed.wrapping_mul(1000).wrapping_add(500 + j as u64),
            defects: Vec::new(),
            ..base.clone()
        };
        let share = defect_count / test + usize::from(j < defect_count % test);
        spec.defects = random_defects(&spec, share, spec.seed ^ 0xdef);
        out.push((format!("defect_{j:03}"), spec));
    }
    out
}

/// Writes every scan as `<id>.pgm`, `<id>.layout.json`, `<id>.boxes.json`
/// plus `manifest.json` into `dir`.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    base: &SynthSpec,
    normal: usize,
    test: usize,
    defect_count: usize,
) -> Result<Manifest, SynthError> {
    let dir = dir.as_ref();
    let io = |e: std::io::Error| SynthError::Io(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let mut scans = Vec::new();
    for (id, spec) in corpus_specs(base, normal, test, defect_count) {
        let scan = generate(&spec)?;
        let entry = CorpusEntry {
            split: if spec.defects.is_empty() && id.starts_with("normal") {
                "train"
            } else {
                "test"
            }
            .into(),
            depth: PathBuf::from(format!("{id}.pgm")),
            layout: PathBuf::from(format!("{id}.layout.json")),
            boxes: PathBuf::from(format!("{id}.boxes.json")),
            defects: spec.defects.len(),
            id,
        };
        write_scan(dir, &entry, &scan)?;
        scans.push(entry);
    }
    let manifest = Manifest {
        base: base.clone(),
        scans,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), text).map_err(io)?;
    Ok(manifest)
}

fn write_scan(dir: &Path, entry: &CorpusEntry, scan: &Scan) -> Result<(), SynthError> {
    save_pgm(&scan.map, dir.join(&entry.depth))?;
    let layout = dir.join(&entry.layout);
    fs::write(&layout, scan.layout.to_json())
        .map_err(|e| SynthError::Io(format!("{}: {e}", layout.display())))?;
    save_boxes(&scan.boxes, dir.join(&entry.boxes)).map_err(|e| SynthError::Io(e.to_string()))
}
