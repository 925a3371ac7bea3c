//! Depth-map container, 3×3 median denoising, min-max normalization and
//! 16-bit binary PGM I/O.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("depth map dimensions must be at least 1x1 (got {width}x{height})")]
    EmptyDimensions { width: usize, height: usize },
    #[error("pixel buffer holds {actual} values but {width}x{height} needs {expected}")]
    PixelCount {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite depth value at index {index}")]
    NonFinite { index: usize },
    #[error("normalized map has value {value} outside [0, 1] at index {index}")]
    OutOfUnitRange { index: usize, value: f64 },
    #[error("normalized map must span exactly [0, 1] (min {min}, max {max})")]
    NotSpanning { min: f64, max: f64 },
    #[error("raw value {value} at index {index} does not fit a 16-bit sample")]
    RawOutOfRange { index: usize, value: f64 },
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PgmError {
    #[error("bad magic number {found:?}, expected \"P5\"")]
    BadMagic { found: String },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0}; only 255 and 65535 are accepted")]
    UnsupportedMaxval(u32),
    #[error("payload holds {actual} bytes but header {width}x{height} needs {expected}")]
    DimensionMismatch {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthState {
    Raw,
    Normalized,
}

/// A row-major grid of elevation values.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    state: DepthState,
}

impl DepthMap {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        state: DepthState,
    ) -> Result<Self, DepthError> {
        if width == 0 || height == 0 {
            return Err(DepthError::EmptyDimensions { width, height });
        }
        let expected = width * height;
        if pixels.len() != expected {
            return Err(DepthError::PixelCount {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        if let Some(index) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(DepthError::NonFinite { index });
        }
        if state == DepthState::Normalized {
            check_normalized(&pixels)?;
        }
        Ok(Self {
            width,
            height,
            pixels,
            state,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self, DepthError> {
        Self::new(width, height, vec![value; width * height], DepthState::Raw)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn state(&self) -> DepthState {
        self.state
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Pixel lookup with clamp-to-edge addressing.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.pixels[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Reinterprets a map that already spans `[0, 1]` (for example one loaded
    /// back from a normalized PGM) as normalized.
    pub fn into_normalized(self) -> Result<Self, DepthError> {
        check_normalized(&self.pixels)?;
        Ok(Self {
            state: DepthState::Normalized,
            ..self
        })
    }

    /// Crops `[x0, x0 + w) × [y0, y0 + h)` into a row-major `f32` buffer.
    pub fn crop_f32(&self, x0: usize, y0: usize, w: usize, h: usize) -> Vec<f32> {
        assert!(
            x0 + w <= self.width && y0 + h <= self.height,
            "crop out of bounds"
        );
        let mut out = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = &self.pixels[y * self.width + x0..y * self.width + x0 + w];
            out.extend(row.iter().map(|&v| v as f32));
        }
        out
    }
}

fn check_normalized(pixels: &[f64]) -> Result<(), DepthError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (index, &value) in pixels.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(DepthError::OutOfUnitRange { index, value });
        }
        lo = lo.min(value);
        hi = hi.max(value);
    }
    if lo != hi && (lo != 0.0 || hi != 1.0) {
        return Err(DepthError::NotSpanning { min: lo, max: hi });
    }
    Ok(())
}

/// 3×3 median filter with clamp-to-edge borders.
pub fn median_filter_3x3(input: &DepthMap) -> DepthMap {
    let (w, h) = (input.width as isize, input.height as isize);
    let mut out = Vec::with_capacity(input.pixels.len());
    let mut window = [0.0f64; 9];
    for y in 0..h {
        for x in 0..w {
            let mut i = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    window[i] = input.get_clamped(x + dx, y + dy);
                    i += 1;
                }
            }
            let (_, median, _) = window.select_nth_unstable_by(4, f64::total_cmp);
            out.push(*median);
        }
    }
    DepthMap {
        width: input.width,
        height: input.height,
        pixels: out,
        state: input.state,
    }
}

/// Result of min-max normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub map: DepthMap,
    /// Set when the input was constant; the output is then all zeros.
    pub degenerate: bool,
    pub min: f64,
    pub max: f64,
}

/// Maps the input linearly so that its minimum becomes 0 and its maximum 1.
pub fn min_max_normalize(input: &DepthMap) -> Normalized {
    let (min, max) = input.min_max();
    let degenerate = max <= min;
    let pixels = if degenerate {
        vec![0.0; input.pixels.len()]
    } else {
        let span = max - min;
        input
            .pixels
            .iter()
            .map(|&z| ((z - min) / span).clamp(0.0, 1.0))
            .collect()
    };
    Normalized {
        map: DepthMap {
            width: input.width,
            height: input.height,
            pixels,
            state: DepthState::Normalized,
        },
        degenerate,
        min,
        max,
    }
}

/// Median filter followed by normalization.
pub fn preprocess(raw: &DepthMap) -> Normalized {
    min_max_normalize(&median_filter_3x3(raw))
}

/// Encodes a map as a 16-bit binary PGM.
///
/// Normalized maps are scaled to the full 16-bit range. Raw maps are written
/// as rounded sample values and must already lie in `[0, 65535]`.
pub fn encode_pgm(map: &DepthMap) -> Result<Vec<u8>, DepthError> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    out.reserve(map.pixels.len() * 2);
    for (index, &v) in map.pixels.iter().enumerate() {
        let sample = match map.state {
            DepthState::Normalized => (v * 65535.0).round(),
            DepthState::Raw => {
                let r = v.round();
                if !(0.0..=65535.0).contains(&r) {
                    return Err(DepthError::RawOutOfRange { index, value: v });
                }
                r
            }
        };
        out.extend_from_slice(&(sample as u16).to_be_bytes());
    }
    Ok(out)
}

/// Decodes a binary PGM. Samples are scaled by `1 / maxval`, so the result
/// always lies in `[0, 1]`; the returned map is `Raw`.
pub fn decode_pgm(bytes: &[u8]) -> Result<DepthMap, DepthError> {
    let mut cursor = HeaderCursor { bytes, pos: 0 };
    let magic = cursor.token()?;
    if magic != "P5" {
        return Err(PgmError::BadMagic { found: magic }.into());
    }
    let width = cursor.number("width")?;
    let height = cursor.number("height")?;
    let maxval = cursor.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PgmError::BadHeader(format!("zero dimension {width}x{height}")).into());
    }
    if maxval != 255 && maxval != 65535 {
        return Err(PgmError::UnsupportedMaxval(maxval as u32).into());
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(cursor.pos) {
        Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
        _ => return Err(PgmError::BadHeader("missing separator after maxval".into()).into()),
    }
    let payload = &bytes[cursor.pos..];
    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    let expected = width * height * bytes_per_sample;
    if payload.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            actual: payload.len(),
        }
        .into());
    }
    if payload.len() > expected {
        return Err(PgmError::DimensionMismatch {
            width,
            height,
            expected,
            actual: payload.len(),
        }
        .into());
    }
    let scale = 1.0 / maxval as f64;
    let pixels = if bytes_per_sample == 2 {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect()
    } else {
        payload.iter().map(|&b| b as f64 * scale).collect()
    };
    DepthMap::new(width, height, pixels, DepthState::Raw)
}

pub fn save_pgm(map: &DepthMap, path: impl AsRef<Path>) -> Result<(), DepthError> {
    let path = path.as_ref();
    let bytes = encode_pgm(map)?;
    fs::write(path, bytes).map_err(|source| DepthError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<DepthMap, DepthError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DepthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_pgm(&bytes)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<String, PgmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PgmError::BadHeader("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self, what: &str) -> Result<usize, PgmError> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| PgmError::BadHeader(format!("invalid {what} {tok:?}")))
    }
}
