//! Dataset ingestion, subset sampling and augmentation.

mod augment;
mod container;

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use augment::{augment, augment_traced, eval_transform, stack, AugmentConfig, AugmentTrace, CropBox};
pub use container::{read_container, write_container, write_png_dir};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::dim(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Expands 1-channel (gray) or 4-channel (RGBA) pixels to RGB.
    pub fn from_channels(height: usize, width: usize, channels: usize, raw: &[u8]) -> Result<Self> {
        let pixels = match channels {
            1 => raw.iter().flat_map(|&v| [v, v, v]).collect(),
            3 => raw.to_vec(),
            4 => raw.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            c => return Err(Error::dim(format!("unsupported channel count {c}"))),
        };
        Self::new(height, width, pixels)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `DCPD` byte container plus an `index,label` CSV sidecar.
    #[default]
    RawContainer,
    /// Directory of PNG files listed in `labels.csv` as `filename,label`.
    PngDirWithCsv,
}

/// Where a split lives and how to read it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub path: PathBuf,
    #[serde(default)]
    pub format: DatasetFormat,
    /// Label CSV; defaults to the container path with a `.csv` extension.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Declared class count; labels must lie in `[0, num_classes)`.
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub split: Split,
}

impl DatasetSource {
    pub fn container(path: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            path: path.into(),
            format: DatasetFormat::RawContainer,
            labels: None,
            num_classes: None,
            split,
        }
    }
}

/// A loaded split, held in memory.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub source: String,
    pub split: Split,
    images: Vec<Arc<Image>>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl DatasetHandle {
    pub fn from_parts(
        source: impl Into<String>,
        split: Split,
        images: Vec<Image>,
        labels: Option<Vec<usize>>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let source = source.into();
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::ingest(
                    &source,
                    "labels",
                    format!("{} labels for {} images", l.len(), images.len()),
                ));
            }
        }
        let inferred = labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0);
        let num_classes = num_classes.unwrap_or(inferred);
        if let (Some(l), true) = (&labels, num_classes > 0) {
            if let Some((row, &bad)) = l.iter().enumerate().find(|(_, &v)| v >= num_classes) {
                return Err(Error::ingest(
                    &source,
                    format!("row {row}"),
                    format!("label {bad} outside [0, {num_classes})"),
                ));
            }
        }
        Ok(Self {
            source,
            split,
            images: images.into_iter().map(Arc::new).collect(),
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image(&self, i: usize) -> &Arc<Image> {
        &self.images[i]
    }

    pub fn images(&self) -> &[Arc<Image>] {
        &self.images
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Samples per class (class-balance metadata).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in self.labels.iter().flatten() {
            counts[l] += 1;
        }
        counts
    }

    /// Copy without any class labels.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Sub-dataset with the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            source: self.source.clone(),
            split: self.split,
            images: indices.iter().map(|&i| Arc::clone(&self.images[i])).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        }
    }
}

/// Reads a split from disk. Every image is converted to RGB.
pub fn load_dataset(src: &DatasetSource) -> Result<DatasetHandle> {
    let (images, labels) = match src.format {
        DatasetFormat::RawContainer => {
            let labels_path = src
                .labels
                .clone()
                .unwrap_or_else(|| src.path.with_extension("csv"));
            let images = read_container(&src.path)?;
            let labels = if labels_path.exists() {
                Some(container::read_index_labels(&labels_path, images.len())?)
            } else {
                None
            };
            (images, labels)
        }
        DatasetFormat::PngDirWithCsv => {
            let (images, labels) = container::read_png_dir(&src.path, src.labels.as_deref())?;
            (images, Some(labels))
        }
    };
    let name = src.path.display().to_string();
    DatasetHandle::from_parts(name, src.split, images, labels, src.num_classes)
}

/// One image selected for continued pretraining.
#[derive(Clone, Debug)]
pub struct Sample {
    pub pixels: Arc<Image>,
    /// Position in the subset; the training target.
    pub datum_index: usize,
    /// Ground-truth class, kept for bookkeeping only.
    pub class_label: Option<usize>,
    /// Row in the originating dataset.
    pub source_index: usize,
}

/// Draws `min(n, len)` distinct rows uniformly and numbers them `0..D` in
/// draw order.
pub fn sample_cp_subset(train: &DatasetHandle, n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::contract("subset size must be at least 1"));
    }
    if train.is_empty() {
        return Err(Error::ingest(&train.source, "dataset", "no images to sample from"));
    }
    let d = n.min(train.len());
    let mut r = rng::stream(seed, "cp-subset", &[]);
    let picks = index::sample(&mut r, train.len(), d);
    Ok(picks
        .into_iter()
        .enumerate()
        .map(|(datum_index, row)| Sample {
            pixels: Arc::clone(train.image(row)),
            datum_index,
            class_label: train.label(row),
            source_index: row,
        })
        .collect())
}

/// Deterministic selection of up to `budget` labeled rows, in increasing row
/// order.
pub fn label_subset(ds: &DatasetHandle, budget: usize, seed: u64) -> Vec<usize> {
    if budget >= ds.len() {
        return (0..ds.len()).collect();
    }
    let mut r = rng::stream(seed, "eval-labels", &[]);
    let mut rows = index::sample(&mut r, ds.len(), budget).into_vec();
    rows.sort_unstable();
    rows
}
