//! Samples, datasets and everything that touches the disk.

mod mpii;
mod persist;
mod synthetic;

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keypoints::PoseAnnotation;
use crate::rng;
use crate::tensor::Tensor;

pub use mpii::{head_segment_length, load_mpii, MPII_JOINT_ORDER};
pub use persist::{
    append_results, load_checkpoint, load_dataset, read_results, results_path, save_checkpoint, save_dataset,
    Checkpoint, ResultRecord, CHECKPOINT_VERSION, DATASET_VERSION,
};
pub use synthetic::{generate_synthetic, synthetic_sample, Bone, BONES, MIN_RESOLUTION};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: format version {found} is not supported (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("annotation record {index}: missing required field `{field}`")]
    MissingField { index: usize, field: String },
    #[error("cannot read image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("{path}: truncated at record {record}")]
    Truncated { path: PathBuf, record: String },
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        DataError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

/// One training or validation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, R, R]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub annotation: PoseAnnotation,
}

impl Sample {
    pub fn resolution(&self) -> usize {
        self.image.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic {
        seed: u64,
        count: usize,
        resolution: usize,
    },
    Mpii {
        annotation_file: String,
    },
    /// Subset of another dataset produced by [`split_train_val`].
    Split {
        parent: Box<Provenance>,
        seed: u64,
        part: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Arc<Sample>>,
    resolution: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(samples: Vec<Arc<Sample>>, resolution: usize, provenance: Provenance) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::Invalid("a dataset must contain at least one sample".into()));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| s.image.shape() != [3, resolution, resolution])
        {
            return Err(DataError::Invalid(format!(
                "sample {i} has image shape {:?}, expected [3, {resolution}, {resolution}]",
                s.image.shape()
            )));
        }
        Ok(Self {
            samples,
            resolution,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn samples(&self) -> &[Arc<Sample>] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }
}

/// Seeded shuffle; the last `val_count` shuffled samples become validation.
pub fn split_train_val(dataset: &Dataset, val_count: usize, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if val_count == 0 || val_count >= dataset.len() {
        return Err(DataError::Invalid(format!(
            "validation count {val_count} must be in 1..{}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(rng::labelled(seed, "train-val-split")));
    let cut = dataset.len() - val_count;
    let part = |idx: &[usize], name: &str| {
        Dataset::new(
            idx.iter().map(|&i| Arc::clone(&dataset.samples[i])).collect(),
            dataset.resolution,
            Provenance::Split {
                parent: Box::new(dataset.provenance.clone()),
                seed,
                part: name.into(),
            },
        )
    };
    Ok((part(&order[..cut], "train")?, part(&order[cut..], "val")?))
}
