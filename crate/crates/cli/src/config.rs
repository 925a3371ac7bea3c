//! Flat `key = value` configuration (TOML syntax, no tables).
//!
//! ```toml
//! seed = 3
//! latent_dims = [2, 16, 128]
//! scales = [1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0]
//! floor = 0.002
//! ```
//!
//! Every key is optional and command-line flags win over the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use towscan::localize::{DEFAULT_FLOOR_FRACTION, DEFAULT_SCALES};
use towscan::nnet::TrainConfig;
use towscan::sampler::{DEFAULT_STRIDE, DEFAULT_WINDOW};
use towscan::synth::SynthSpec;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub window: usize,
    pub stride: usize,
    pub tow_count: usize,
    pub tow_width: usize,
    pub latent_dim: usize,
    pub latent_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub scales: Vec<f64>,
    /// Fixed detection floor; when absent it comes from the training profile.
    pub floor: Option<f64>,
    pub floor_fraction: f64,
    pub floor_margin: f64,
    /// Share of a window a ground-truth box must cover to make it abnormal.
    pub label_fraction: f64,
    pub width: usize,
    pub height: usize,
    pub normal_scans: usize,
    pub test_scans: usize,
    pub clean_scans: usize,
    pub defects: usize,
    pub groove_depth: f64,
    pub noise_std: f64,
    pub impulse_rate: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let synth = SynthSpec::default();
        Self {
            seed: 0,
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            tow_count: synth.tow_count,
            tow_width: synth.tow_width,
            latent_dim: 16,
            latent_dims: vec![2, 16, 128],
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            scales: DEFAULT_SCALES.to_vec(),
            floor: None,
            floor_fraction: DEFAULT_FLOOR_FRACTION,
            floor_margin: 1.5,
            label_fraction: 0.1,
            width: synth.width,
            height: synth.height,
            normal_scans: 42,
            test_scans: 2,
            clean_scans: 0,
            defects: 6,
            groove_depth: synth.groove_depth,
            noise_std: synth.surface_noise_std,
            impulse_rate: synth.impulse_rate,
        }
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub tow_count: Option<usize>,
    pub latent_dim: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub scales: Option<Vec<f64>>,
    pub floor: Option<f64>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("config: {}", e.message())))
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = overrides.$field.clone() { cfg.$field = v; })*
            };
        }
        take!(seed, window, stride, tow_count, latent_dim, epochs, batch_size, scales);
        if overrides.floor.is_some() {
            cfg.floor = overrides.floor;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::config(m));
        if self.window == 0 || !self.window.is_multiple_of(8) {
            return fail(format!(
                "window must be a positive multiple of 8, got {}",
                self.window
            ));
        }
        if self.stride == 0 {
            return fail("stride must be at least 1".into());
        }
        if self.tow_count == 0 {
            return fail("tow_count must be at least 1".into());
        }
        if self.latent_dim == 0 || self.latent_dims.contains(&0) {
            return fail("latent dimensions must be positive".into());
        }
        if self.scales.is_empty()
            || self.scales.windows(2).any(|p| p[0] >= p[1])
            || self.scales.iter().any(|&s| !(s >= 0.5 && s.is_finite()))
        {
            return fail(format!(
                "scales must be ascending and at least 0.5, got {:?}",
                self.scales
            ));
        }
        if let Some(f) = self.floor {
            if !(f >= 0.0 && f.is_finite()) {
                return fail(format!("floor must be finite and non-negative, got {f}"));
            }
        }
        if !(0.0..=1.0).contains(&self.label_fraction) || self.label_fraction == 0.0 {
            return fail(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            ));
        }
        if self.window > self.width || self.window > self.height {
            return fail(format!(
                "window {} exceeds the {}x{} scan size",
                self.window, self.width, self.height
            ));
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            width: self.width,
            height: self.height,
            tow_count: self.tow_count,
            tow_width: self.tow_width,
            groove_depth: self.groove_depth,
            surface_noise_std: self.noise_std,
            impulse_rate: self.impulse_rate,
            seed: self.seed,
            defects: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = PipelineConfig::default();
        assert_eq!(
            (c.window, c.stride, c.batch_size, c.epochs),
            (32, 8, 128, 50)
        );
        assert_eq!(c.latent_dims, vec![2, 16, 128]);
    }

    #[test]
    fn file_then_flags() {
        let c = PipelineConfig::parse("seed = 4\nepochs = 3\nscales = [1.0, 2.0]\n").unwrap();
        assert_eq!((c.seed, c.epochs, c.scales.clone()), (4, 3, vec![1.0, 2.0]));
        c.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 4\nepochs = 3\n").unwrap();
        let o = Overrides {
            epochs: Some(7),
            ..Overrides::default()
        };
        let c = PipelineConfig::load(Some(&path), &o).unwrap();
        assert_eq!((c.seed, c.epochs), (4, 7));
    }

    #[test]
    fn rejects_unknown_keys_and_contradictions() {
        assert!(PipelineConfig::parse("windw = 32\n").is_err());
        let c = PipelineConfig {
            window: 512,
            ..PipelineConfig::default()
        };
        assert_eq!(c.validate().unwrap_err().code, "config");
        let c = PipelineConfig {
            scales: vec![2.0, 1.0],
            ..PipelineConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
