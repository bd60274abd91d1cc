//! Dataset ingestion: manifests, images, deterministic splits, and the
//! synthetic long-caption generator.

pub mod image_io;
pub mod synthetic;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// H x W x 3 pixel tensor, channels interleaved, values in [0, 1].
/// Stored as f32 to match the on-disk container exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl PixelImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3);
        PixelImage { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        PixelImage { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn is_finite_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v))
    }
}

/// One dataset record: an image paired with its caption.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: PixelImage,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub caption: String,
}

/// Ordered list of records plus the directory image paths resolve against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }
}

/// Parses line-delimited JSON records ({id, image_path, caption}), keeping
/// file order. Image paths resolve relative to the manifest's directory and
/// must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        let image_path = root.join(&record.image_path);
        if !image_path.is_file() {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("image path {} does not resolve to a file", image_path.display()),
            });
        }
        records.push(record);
    }
    Ok(DatasetManifest { records, root })
}

/// Split ratios lifted from the reference corpus layout: 65:8:8.
const SPLIT_TRAIN: usize = 65;
const SPLIT_VAL: usize = 8;
const SPLIT_TEST: usize = 8;
const SPLIT_TOTAL: usize = SPLIT_TRAIN + SPLIT_VAL + SPLIT_TEST;

/// Seeded shuffle followed by a 65:8:8 partition. Val and test counts round
/// down; the remainder goes to train, so the three parts always partition the
/// input exactly.
pub fn split_dataset(
    manifest: &DatasetManifest,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    let n = manifest.records.len();
    if n < 3 {
        return Err(Error::DatasetTooSmall(format!("need at least 3 records to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let val_n = n * SPLIT_VAL / SPLIT_TOTAL;
    let test_n = n * SPLIT_TEST / SPLIT_TOTAL;
    let train_n = n - val_n - test_n;
    let part = |range: std::ops::Range<usize>| DatasetManifest {
        records: order[range].iter().map(|&i| manifest.records[i].clone()).collect(),
        root: manifest.root.clone(),
    };
    Ok((part(0..train_n), part(train_n..train_n + val_n), part(train_n + val_n..n)))
}

/// Loads every record of a manifest, resizing images to `target_size`.
pub fn load_samples(manifest: &DatasetManifest, target_size: usize) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let image = image_io::load_image(&manifest.resolve(r), target_size)?;
            Ok(Sample { id: r.id.clone(), image, caption: r.caption.clone() })
        })
        .collect()
}
