//! Pose sequences on disk: the `MOTN` file format, split manifests,
//! windowing, and a synthetic motion generator.

mod motion_file;
mod synthetic;
mod windows;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::FRAME_RATE_HZ;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use motion_file::{decode_motion, encode_motion, read_motion, write_motion, MAGIC, VERSION};
pub use synthetic::{generate_synthetic, synthesize, SyntheticSpec};
pub use windows::{make_windows, window_count, WindowedSample};

/// Axis-angle joint rotations over time, `frames: [N, S, M]` in radians.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub frames: Tensor,
    pub frame_rate_hz: f64,
}

impl PoseSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 3 {
            return Err(Error::shape(format!(
                "pose sequence must be [N, S, M], got {:?}",
                frames.shape()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Data("pose sequence contains non-finite values".into()));
        }
        Ok(PoseSequence {
            frames,
            frame_rate_hz: FRAME_RATE_HZ,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joints(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn joint_dim(&self) -> usize {
        self.frames.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

/// File lists per split, relative to the directory holding the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl SplitManifest {
    pub fn files(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for name in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(name) {
                return Err(Error::Data(format!("`{name}` appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        let manifest: SplitManifest =
            serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(path))?;
        manifest.check_disjoint()?;
        Ok(manifest)
    }
}

/// Accepts either a manifest file or the dataset directory containing one.
pub fn resolve_manifest(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_split(manifest_path: impl AsRef<Path>, split: Split) -> Result<Vec<PoseSequence>> {
    let path = resolve_manifest(manifest_path);
    let manifest = SplitManifest::load(&path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    manifest
        .files(split)
        .iter()
        .map(|name| read_motion(root.join(name)))
        .collect()
}

/// All windows of every sequence, never straddling two sequences.
pub fn windows_for(
    sequences: &[PoseSequence],
    window: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowedSample>> {
    let mut out = Vec::new();
    for seq in sequences {
        out.extend(make_windows(&seq.frames, window, horizon, stride)?);
    }
    Ok(out)
}
