//! Big-endian IDX image/label files: magic 2051 for images (count, rows,
//! cols, then unsigned bytes), magic 2049 for labels. Pixels are scaled by
//! 1/255 on load and quantized back to bytes on save.

use std::fs;
use std::path::Path;

use crate::data::{fnv1a_hex, Dataset, Provenance};
use crate::error::{CpacError, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(CpacError::data(self.file, "truncated header"));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CpacError::data(
                self.file,
                format!(
                    "truncated payload: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Loads a paired IDX image file and label file into a dataset.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_name = images_path.display().to_string();
    let label_name = labels_path.display().to_string();

    let image_bytes = fs::read(images_path)
        .map_err(|e| CpacError::data(&image_name, format!("cannot read: {e}")))?;
    let label_bytes = fs::read(labels_path)
        .map_err(|e| CpacError::data(&label_name, format!("cannot read: {e}")))?;

    let mut r = Reader {
        bytes: &image_bytes,
        pos: 0,
        file: &image_name,
    };
    let magic = r.u32()?;
    if magic != IMAGES_MAGIC {
        return Err(CpacError::data(
            &image_name,
            format!("bad image magic {magic}, expected {IMAGES_MAGIC}"),
        ));
    }
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let pixels = r.take(count * rows * cols)?;

    let mut lr = Reader {
        bytes: &label_bytes,
        pos: 0,
        file: &label_name,
    };
    let lmagic = lr.u32()?;
    if lmagic != LABELS_MAGIC {
        return Err(CpacError::data(
            &label_name,
            format!("bad label magic {lmagic}, expected {LABELS_MAGIC}"),
        ));
    }
    let lcount = lr.u32()? as usize;
    if lcount != count {
        return Err(CpacError::data(
            &label_name,
            format!("label count {lcount} does not match image count {count}"),
        ));
    }
    let raw_labels = lr.take(lcount)?;

    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * rows * cols;
        let mut t = Tensor::zeros(&[rows, cols, 1]);
        for x in 0..rows {
            for y in 0..cols {
                // IDX stores row-major pixel bytes
                t.data_mut()[x + rows * y] = pixels[start + x * cols + y] as f64 / 255.0;
            }
        }
        images.push(t);
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(
        images,
        labels,
        classes,
        Provenance::IdxFiles {
            images_path: image_name,
            images_fnv1a: fnv1a_hex(&image_bytes),
            labels_path: label_name,
            labels_fnv1a: fnv1a_hex(&label_bytes),
        },
    )
}

/// Writes a dataset back out as an IDX pair, quantizing pixels to bytes.
pub fn save_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (rows, cols, s) = ds
        .image_dims()
        .ok_or_else(|| CpacError::argument("cannot save an empty dataset"))?;
    if s != 1 {
        return Err(CpacError::argument("IDX export supports single-channel images"));
    }
    let mut image_bytes = Vec::with_capacity(16 + ds.len() * rows * cols);
    image_bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in &ds.images {
        for x in 0..rows {
            for y in 0..cols {
                let q = (im.data()[x + rows * y] * 255.0).round().clamp(0.0, 255.0);
                image_bytes.push(q as u8);
            }
        }
    }
    let mut label_bytes = Vec::with_capacity(8 + ds.len());
    label_bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    label_bytes.extend(ds.labels.iter().map(|&l| l as u8));

    fs::write(images_path, image_bytes)?;
    fs::write(labels_path, label_bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_shapes;

    fn fixture_bytes() -> (Vec<u8>, Vec<u8>) {
        // two 2x3 images with known pixel bytes, labels 1 and 0
        let mut images = Vec::new();
        images.extend_from_slice(&2051u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&3u32.to_be_bytes());
        images.extend_from_slice(&[0, 51, 102, 153, 204, 255]); // image 0, rows of 3
        images.extend_from_slice(&[255, 204, 153, 102, 51, 0]); // image 1
        let mut labels = Vec::new();
        labels.extend_from_slice(&2049u32.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[1, 0]);
        (images, labels)
    }

    #[test]
    fn hand_built_fixture_roundtrips_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        let (ib, lb) = fixture_bytes();
        fs::write(&ip, &ib).unwrap();
        fs::write(&lp, &lb).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![1, 0]);
        let im = &ds.images[0];
        assert_eq!(im.shape(), &[2, 3, 1]);
        // row-major bytes [0,51,102 / 153,204,255] scaled by 1/255
        assert_eq!(im.at(&[0, 0, 0]), 0.0);
        assert_eq!(im.at(&[0, 1, 0]), 51.0 / 255.0);
        assert_eq!(im.at(&[0, 2, 0]), 102.0 / 255.0);
        assert_eq!(im.at(&[1, 0, 0]), 153.0 / 255.0);
        assert_eq!(im.at(&[1, 2, 0]), 1.0);
        assert!(ds.images.iter().flat_map(|t| t.data()).all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn save_then_load_is_identity_on_quantized_pixels() {
        let ds = synthetic_shapes(7, 12, 6, 6, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        save_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.labels, ds.labels);
        for (a, b) in ds.images.iter().zip(&back.images) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let quantized = (x * 255.0).round().clamp(0.0, 255.0) / 255.0;
                assert!((quantized - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_magic_and_truncation_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        let (mut ib, lb) = fixture_bytes();
        ib[3] = 99; // corrupt the magic
        fs::write(&ip, &ib).unwrap();
        fs::write(&lp, &lb).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
        assert!(err.contains("imgs"), "error must name the file: {err}");

        let (ib, _) = fixture_bytes();
        fs::write(&ip, &ib[..14]).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn count_mismatch_names_label_file() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        let (ib, mut lb) = fixture_bytes();
        lb[7] = 3; // claim three labels
        lb.push(2);
        fs::write(&ip, &ib).unwrap();
        fs::write(&lp, &lb).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("does not match image count"), "{err}");
        assert!(err.contains("lbls"), "{err}");
    }
}
