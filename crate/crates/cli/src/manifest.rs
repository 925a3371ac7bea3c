//! The pipeline manifest: one entry per scan listing every artifact produced
//! so far. Each corpus stage reads a manifest, adds its outputs and writes an
//! updated copy into its output directory.
//!
//! Paths inside the manifest's directory are stored relative to it, all
//! others as given.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use towscan::synth;

use crate::error::CliError;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub id: String,
    /// `train` or `test`.
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<PathBuf>,
    /// Ground-truth boxes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_layout: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub windows: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_map: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scans: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Training score profile and detection floor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<PathBuf>,
}

fn resolve(dir: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = dir.join(&*path);
        }
    }
}

fn relativize(dir: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if let Ok(rel) = path.strip_prefix(dir) {
            *path = rel.to_path_buf();
        }
    }
}

impl Entry {
    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 8] {
        [
            &mut self.raw,
            &mut self.truth,
            &mut self.truth_layout,
            &mut self.normalized,
            &mut self.layout,
            &mut self.windows,
            &mut self.anomaly_map,
            &mut self.boxes,
        ]
    }

    pub fn require<'a>(
        &'a self,
        field: &str,
        path: &'a Option<PathBuf>,
    ) -> Result<&'a Path, CliError> {
        let p = path.as_deref().ok_or_else(|| {
            CliError::new(
                "missing_artifact",
                format!(
                    "scan {} has no {field}; run the stage that produces it first",
                    self.id
                ),
            )
        })?;
        require_file(p)?;
        Ok(p)
    }
}

pub fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::new(
            "missing_file",
            format!("{} does not exist", p.display()),
        ))
    }
}

impl Manifest {
    fn paths_mut(&mut self) -> Vec<&mut Option<PathBuf>> {
        let mut out: Vec<&mut Option<PathBuf>> =
            vec![&mut self.model, &mut self.profile, &mut self.threshold];
        for e in &mut self.scans {
            out.extend(e.paths_mut());
        }
        out
    }

    /// Reads a pipeline manifest or a corpus manifest written by `synth-gen`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let dir = if dir.as_os_str().is_empty() {
            Path::new(".")
        } else {
            dir
        };
        let dir = dir.canonicalize().map_err(|e| CliError::io(dir, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::format(format!("{}: {e}", path.display())))?;
        let mut m = if value.get("base").is_some() {
            let corpus: synth::Manifest = serde_json::from_value(value)
                .map_err(|e| CliError::format(format!("{}: {e}", path.display())))?;
            Self {
                scans: corpus
                    .scans
                    .into_iter()
                    .map(|c| Entry {
                        id: c.id,
                        split: c.split,
                        raw: Some(c.depth),
                        truth: Some(c.boxes),
                        truth_layout: Some(c.layout),
                        ..Entry::default()
                    })
                    .collect(),
                ..Self::default()
            }
        } else {
            serde_json::from_value(value)
                .map_err(|e| CliError::format(format!("{}: {e}", path.display())))?
        };
        for p in m.paths_mut() {
            resolve(&dir, p);
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let mut m = self.clone();
        for p in m.paths_mut() {
            relativize(dir, p);
        }
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.scans.iter().filter(move |e| e.split == name)
    }

    pub fn model_path(&self) -> Result<&Path, CliError> {
        let p = self.model.as_deref().ok_or_else(|| {
            CliError::new(
                "missing_artifact",
                "manifest names no model; run train first",
            )
        })?;
        require_file(p)?;
        Ok(p)
    }
}
