//! On-disk dataset layout and the in-memory form used by training.
//!
//! A dataset directory holds `manifest.jsonl` plus 8-bit grayscale PNGs at
//! the `image_path`s recorded in the manifest. The in-memory form keeps all
//! images as u8 so the synthetic in-memory path and the disk path are
//! bit-identical.

use crate::imageio::{self, ImageIoError};
use gazeshift_core::data::{parse_manifest, serialize_manifest, Eye, FrameRecord, ManifestError};
use gazeshift_core::syntheye::{mirror_horizontal, GrayImage, RenderError, SynthFrame};
use ndarray::{Array2, Array4, Axis};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest {path}: {source}")]
    Manifest {
        path: String,
        #[source]
        source: ManifestError,
    },
    #[error("missing image file: {0}")]
    MissingImage(String),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset is empty")]
    Empty,
    #[error("mixed image sizes: {0}x{1} vs {2}x{3}")]
    MixedSizes(usize, usize, usize, usize),
}

pub struct LoadedDataset {
    pub records: Vec<FrameRecord>,
    images: Vec<Array2<u8>>,
    pub height: usize,
    pub width: usize,
}

impl LoadedDataset {
    /// Render a synthetic dataset into memory (no files touched).
    pub fn from_synth(frames: &[SynthFrame]) -> Result<Self, DatasetError> {
        if frames.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut records = Vec::with_capacity(frames.len());
        let mut images = Vec::with_capacity(frames.len());
        for f in frames {
            records.push(f.record.clone());
            images.push(imageio::quantize(&f.render()?));
        }
        let (h, w) = (images[0].dim().0, images[0].dim().1);
        Ok(LoadedDataset {
            records,
            images,
            height: h,
            width: w,
        })
    }

    /// Load a dataset directory: parse + validate the manifest, then read
    /// every referenced image. Dangling paths are reported.
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let manifest_path = dir.join("manifest.jsonl");
        let text = std::fs::read_to_string(&manifest_path)?;
        let records = parse_manifest(&text).map_err(|source| DatasetError::Manifest {
            path: manifest_path.display().to_string(),
            source,
        })?;
        if records.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut images = Vec::with_capacity(records.len());
        for r in &records {
            let p = dir.join(&r.image_path);
            if !p.exists() {
                return Err(DatasetError::MissingImage(p.display().to_string()));
            }
            images.push(imageio::read_gray_png(&p)?);
        }
        let (h, w) = images[0].dim();
        for img in &images {
            let (ih, iw) = img.dim();
            if (ih, iw) != (h, w) {
                return Err(DatasetError::MixedSizes(h, w, ih, iw));
            }
        }
        Ok(LoadedDataset {
            records,
            images,
            height: h,
            width: w,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_f32(&self, idx: usize) -> GrayImage {
        imageio::dequantize(&self.images[idx])
    }

    /// Batch of images normalized to [-1,1], optionally mirrored per entry.
    pub fn batch(&self, entries: &[(usize, bool)]) -> Array4<f32> {
        let mut out = Array4::<f32>::zeros((entries.len(), 1, self.height, self.width));
        for (i, (idx, flip)) in entries.iter().enumerate() {
            let img = self.image_f32(*idx);
            let img = if *flip { mirror_horizontal(&img) } else { img };
            let mut slice = out.index_axis_mut(Axis(0), i);
            for ((y, x), &v) in img.indexed_iter() {
                slice[[0, y, x]] = 2.0 * v - 1.0;
            }
        }
        out
    }
}

/// Write a synthetic dataset to disk: one PNG per frame plus
/// `manifest.jsonl`. Returns the number of images written.
pub fn write_synth_dataset(dir: &Path, frames: &[SynthFrame]) -> Result<usize, DatasetError> {
    std::fs::create_dir_all(dir)?;
    for f in frames {
        let img = f.render()?;
        imageio::write_gray_png_f32(&dir.join(&f.record.image_path), &img)?;
    }
    let records: Vec<FrameRecord> = frames.iter().map(|f| f.record.clone()).collect();
    std::fs::write(dir.join("manifest.jsonl"), serialize_manifest(&records))?;
    Ok(frames.len())
}

/// Records paired by (subject, session, frame_index) into synchronized
/// left/right tuples (used by binocular pipelines).
pub fn synchronized_pairs(records: &[FrameRecord]) -> Vec<(usize, usize)> {
    use std::collections::BTreeMap;
    let mut by_time: BTreeMap<(&str, &str, i64), (Option<usize>, Option<usize>)> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let e = by_time
            .entry((&r.subject_id, &r.session_id, r.frame_index))
            .or_default();
        match r.eye {
            Eye::Left => e.0 = Some(i),
            Eye::Right => e.1 = Some(i),
        }
    }
    by_time
        .into_values()
        .filter_map(|(l, r)| Some((l?, r?)))
        .collect()
}

pub fn dataset_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}
