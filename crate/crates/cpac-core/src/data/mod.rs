//! Dataset ingestion and batching: IDX image files, a synthetic pattern
//! generator standing in for external defect data, seeded subsetting and
//! batch iteration. Datasets are immutable after construction.

mod batch;
mod idx;
mod synthetic;

pub use batch::{batches, subset};
pub use idx::{load_idx, save_idx};
pub use synthetic::synthetic_shapes;

use serde::{Deserialize, Serialize};

use crate::error::{CpacError, Result};
use crate::tensor::Tensor;

/// Where a dataset came from: file hashes for loaded data, the generator
/// seed for synthetic data, or the operation that derived it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Provenance {
    IdxFiles {
        images_path: String,
        images_fnv1a: String,
        labels_path: String,
        labels_fnv1a: String,
    },
    Synthetic {
        seed: u64,
        count: usize,
        classes: usize,
    },
    Derived {
        source: Box<Provenance>,
        description: String,
    },
}

/// Labeled image tensors, all sharing one `X x Y x S` shape, with pixel
/// intensities in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let ds = Dataset {
            images,
            labels,
            classes,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(CpacError::argument(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(CpacError::argument(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        if let Some(first) = self.images.first() {
            if self.images.iter().any(|im| im.shape() != first.shape()) {
                return Err(CpacError::argument("images do not share one shape"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(X, Y, S)` of the images, if any.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        self.images
            .first()
            .map(|im| (im.extent(0), im.extent(1), im.extent(2)))
    }

    /// New dataset holding the given samples, in order.
    pub fn select(&self, indices: &[usize], description: &str) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(CpacError::argument(format!(
                "sample index {bad} out of range for {} samples",
                self.len()
            )));
        }
        Dataset::new(
            indices.iter().map(|&i| self.images[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
            Provenance::Derived {
                source: Box::new(self.provenance.clone()),
                description: description.to_string(),
            },
        )
    }
}

/// FNV-1a over file bytes; recorded in provenance so runs can be tied to
/// their exact inputs.
pub(crate) fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}
