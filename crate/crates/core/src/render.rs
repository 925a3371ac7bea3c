//! Binary PPM (P6) overlays on a grayscale depth map.
//!
//! Colours: score dots are `(255·s, 0, 0)` with `s` the score rescaled by
//! the map's own min and max; predicted boxes are red, ground truth green,
//! tow edges cyan and centerlines yellow.

use std::fs;
use std::path::Path;

use crate::anomaly::AnomalyMap;
use crate::depth::DepthMap;
use crate::localize::DefectBox;
use crate::tows::TowLayout;

pub const PREDICTED: [u8; 3] = [255, 0, 0];
pub const GROUND_TRUTH: [u8; 3] = [0, 255, 0];
pub const EDGE: [u8; 3] = [0, 255, 255];
pub const CENTERLINE: [u8; 3] = [255, 255, 0];

#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    /// Gray image of the map, rescaled by its own min and max.
    pub fn from_depth(map: &DepthMap) -> Self {
        let (lo, hi) = map.min_max();
        let span = if hi > lo { hi - lo } else { 1.0 };
        let rgb = map
            .pixels()
            .iter()
            .flat_map(|&v| {
                let g = (255.0 * (v - lo) / span).round() as u8;
                [g, g, g]
            })
            .collect();
        Self {
            width: map.width(),
            height: map.height(),
            rgb,
        }
    }

    pub fn put(&mut self, x: isize, y: isize, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.rgb[i..i + 3].copy_from_slice(&color);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// One-pixel outline of the box with corners rounded outward.
    pub fn outline(&mut self, b: &DefectBox, color: [u8; 3]) {
        let x0 = b.x.floor() as isize;
        let y0 = b.y.floor() as isize;
        let x1 = (b.x + b.w).ceil() as isize - 1;
        let y1 = (b.y + b.h).ceil() as isize - 1;
        for x in x0..=x1 {
            self.put(x, y0, color);
            self.put(x, y1, color);
        }
        for y in y0..=y1 {
            self.put(x0, y, color);
            self.put(x1, y, color);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_ppm())
    }
}

/// Score dots (3×3) at every window centre.
pub fn anomaly_overlay(map: &DepthMap, scores: &AnomalyMap) -> Canvas {
    let mut c = Canvas::from_depth(map);
    let (lo, hi) = scores
        .scores()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| {
            (a.min(s), b.max(s))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    for t in &scores.tows {
        for p in &t.points {
            let red = (255.0 * (p.score - lo) / span).round() as u8;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    c.put(
                        p.center_x as isize + dx,
                        p.center_y as isize + dy,
                        [red, 0, 0],
                    );
                }
            }
        }
    }
    c
}

pub fn box_overlay(map: &DepthMap, predicted: &[DefectBox], ground_truth: &[DefectBox]) -> Canvas {
    let mut c = Canvas::from_depth(map);
    for b in ground_truth {
        c.outline(b, GROUND_TRUTH);
    }
    for b in predicted {
        c.outline(b, PREDICTED);
    }
    c
}

/// Detected tow edges and centerlines across the layup.
pub fn layout_overlay(map: &DepthMap, layout: &TowLayout) -> Canvas {
    let mut c = Canvas::from_depth(map);
    let (left, right) = layout.vertical_bounds;
    for &row in &layout.horizontal_edges {
        for x in left..right {
            c.put(x as isize, row as isize, EDGE);
        }
    }
    for y in 0..c.height {
        c.put(left as isize, y as isize, EDGE);
        c.put(right as isize - 1, y as isize, EDGE);
    }
    for line in &layout.centerlines {
        for x in line.x_start..line.x_end {
            c.put(x as isize, line.row as isize, CENTERLINE);
        }
    }
    c
}
