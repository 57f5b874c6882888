//! Headerless planar 8-bit frames and the JSON sequence manifest.
//!
//! A manifest looks like
//!
//! ```json
//! {
//!   "width": 16, "height": 16, "channels": 1, "bit_depth": 8,
//!   "frames": ["x000.raw", "x001.raw"],
//!   "ground_truth": ["y000.raw", "y001.raw"]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory. `ground_truth` is
//! optional; when present it pairs one-to-one with `frames`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    #[serde(default = "default_bit_depth")]
    pub bit_depth: u32,
    /// Redundant with `frames.len()`; checked when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_count: Option<usize>,
    pub frames: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<PathBuf>>,
}

fn default_bit_depth() -> u32 {
    8
}

impl SequenceManifest {
    pub fn frame_bytes(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return Err(Error::Manifest("frame dimensions must be positive".into()));
        }
        if self.bit_depth != 8 {
            return Err(Error::Manifest(format!(
                "bit depth {} unsupported, only 8",
                self.bit_depth
            )));
        }
        if self.frames.is_empty() {
            return Err(Error::Manifest("no frames listed".into()));
        }
        if let Some(n) = self.frame_count {
            if n != self.frames.len() {
                return Err(Error::Manifest(format!(
                    "frame_count {n} but {} frames listed",
                    self.frames.len()
                )));
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != self.frames.len() {
                return Err(Error::Manifest(format!(
                    "{} ground-truth paths for {} frames",
                    gt.len(),
                    self.frames.len()
                )));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<SequenceManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: SequenceManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(path: &Path, manifest: &SequenceManifest) -> Result<()> {
    manifest.validate()?;
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Bytes mapped to `[0, 1]` by `b / 255`.
pub fn frame_from_bytes(bytes: &[u8], channels: usize, height: usize, width: usize) -> Result<Tensor> {
    Tensor::from_vec(
        channels,
        height,
        width,
        bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Values clamped to `[0, 1]` and rounded to the nearest of 256 levels.
pub fn frame_to_bytes(frame: &Tensor) -> Vec<u8> {
    frame
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn load_frame(path: &Path, channels: usize, height: usize, width: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = channels * height * width;
    if bytes.len() != expected {
        return Err(Error::FrameSize {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    frame_from_bytes(&bytes, channels, height, width)
}

pub fn save_frame(path: &Path, frame: &Tensor) -> Result<()> {
    fs::write(path, frame_to_bytes(frame)).map_err(|e| Error::io(path, e))
}

/// Frames and optional ground truth listed by a manifest.
#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub manifest: SequenceManifest,
    pub frames: Vec<Tensor>,
    pub ground_truth: Option<Vec<Tensor>>,
}

pub fn load_sequence(manifest_path: &Path) -> Result<LoadedSequence> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let load_all = |paths: &[PathBuf]| -> Result<Vec<Tensor>> {
        paths
            .iter()
            .map(|p| load_frame(&base.join(p), manifest.channels, manifest.height, manifest.width))
            .collect()
    };
    let frames = load_all(&manifest.frames)?;
    let ground_truth = manifest.ground_truth.as_deref().map(load_all).transpose()?;
    Ok(LoadedSequence {
        manifest,
        frames,
        ground_truth,
    })
}

/// Writes `frames` (and ground truth) as `{prefix}NNN.raw` files next to a
/// manifest at `manifest_path`.
pub fn save_sequence(
    manifest_path: &Path,
    frames: &[Tensor],
    ground_truth: Option<&[Tensor]>,
) -> Result<SequenceManifest> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Manifest("no frames to save".into()))?;
    if frames.iter().chain(ground_truth.into_iter().flatten()).any(|f| !f.same_shape(first)) {
        return Err(Error::shape("save_sequence", "frames differ in shape"));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let stem = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "seq".into());
    let write_all = |tag: &str, list: &[Tensor]| -> Result<Vec<PathBuf>> {
        list.iter()
            .enumerate()
            .map(|(i, f)| {
                let name = PathBuf::from(format!("{stem}_{tag}{i:03}.raw"));
                save_frame(&base.join(&name), f)?;
                Ok(name)
            })
            .collect()
    };
    let manifest = SequenceManifest {
        width: first.width(),
        height: first.height(),
        channels: first.channels(),
        bit_depth: 8,
        frame_count: Some(frames.len()),
        frames: write_all("x", frames)?,
        ground_truth: ground_truth.map(|gt| write_all("y", gt)).transpose()?,
    };
    write_manifest(manifest_path, &manifest)?;
    Ok(manifest)
}
