//! Deterministic synthetic pattern datasets. Classes are visually distinct
//! shapes (bars, crosses, blobs, frames, ..) with jittered placement and
//! mild noise, separable by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Provenance};
use crate::error::{CpacError, Result};
use crate::tensor::Tensor;

const PATTERN_KINDS: usize = 10;

/// Generates `count` labeled `x by y` single-channel images across `classes`
/// balanced classes. Same seed, same dataset, bit for bit.
pub fn synthetic_shapes(
    seed: u64,
    count: usize,
    x: usize,
    y: usize,
    classes: usize,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(CpacError::argument("synthetic_shapes needs at least 2 classes"));
    }
    if x < 5 || y < 5 {
        return Err(CpacError::argument("synthetic images must be at least 5x5"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        images.push(draw_pattern(&mut rng, x, y, class % PATTERN_KINDS));
        labels.push(class);
    }
    Dataset::new(
        images,
        labels,
        classes,
        Provenance::Synthetic {
            seed,
            count,
            classes,
        },
    )
}

fn draw_pattern(rng: &mut ChaCha8Rng, x: usize, y: usize, kind: usize) -> Tensor {
    let mut im = Tensor::zeros(&[x, y, 1]);
    let jx = rng.gen_range(0..=1usize);
    let jy = rng.gen_range(0..=1usize);
    let mut px = |ix: usize, iy: usize, v: f64| {
        if ix < x && iy < y {
            im.data_mut()[ix + x * iy] = v;
        }
    };
    let bright = 0.9;
    match kind {
        // horizontal bar
        0 => {
            let row = x / 2 - 1 + jx;
            for iy in 0..y {
                px(row, iy, bright);
                px(row + 1, iy, bright);
            }
        }
        // vertical bar
        1 => {
            let col = y / 2 - 1 + jy;
            for ix in 0..x {
                px(ix, col, bright);
                px(ix, col + 1, bright);
            }
        }
        // cross
        2 => {
            let row = x / 2 - 1 + jx;
            let col = y / 2 - 1 + jy;
            for iy in 0..y {
                px(row, iy, bright);
            }
            for ix in 0..x {
                px(ix, col, bright);
            }
        }
        // filled blob
        3 => {
            let cx = x / 2 - 1 + jx;
            let cy = y / 2 - 1 + jy;
            for dx in 0..3.min(x) {
                for dy in 0..3.min(y) {
                    px(cx + dx - 1, cy + dy - 1, bright);
                }
            }
        }
        // main diagonal
        4 => {
            for i in 0..x.min(y) {
                px(i, i, bright);
                if i + 1 < y {
                    px(i, i + 1, bright);
                }
            }
        }
        // anti-diagonal
        5 => {
            for i in 0..x.min(y) {
                px(i, y - 1 - i, bright);
                if y >= i + 2 {
                    px(i, y - 2 - i, bright);
                }
            }
        }
        // border frame
        6 => {
            for iy in 0..y {
                px(0, iy, bright);
                px(x - 1, iy, bright);
            }
            for ix in 0..x {
                px(ix, 0, bright);
                px(ix, y - 1, bright);
            }
        }
        // checkerboard of 2x2 blocks
        7 => {
            for ix in 0..x {
                for iy in 0..y {
                    if ((ix / 2) + (iy / 2)) % 2 == 0 {
                        px(ix, iy, bright * 0.8);
                    }
                }
            }
        }
        // two horizontal bars
        8 => {
            let r1 = x / 4 + jx;
            let r2 = 3 * x / 4 - 1 + jx;
            for iy in 0..y {
                px(r1, iy, bright);
                px(r2.min(x - 1), iy, bright);
            }
        }
        // bright left half
        _ => {
            for ix in 0..x {
                for iy in 0..y / 2 {
                    px(ix, iy, bright * 0.7);
                }
            }
        }
    }
    // mild uniform noise, clamped to [0, 1]
    for v in im.data_mut() {
        *v = (*v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
    }
    im
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bit_identical_datasets() {
        let a = synthetic_shapes(99, 40, 8, 8, 4).unwrap();
        let b = synthetic_shapes(99, 40, 8, 8, 4).unwrap();
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = synthetic_shapes(1, 0, 8, 8, 3).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.classes, 3);
    }

    #[test]
    fn labels_are_balanced_and_pixels_in_range() {
        let ds = synthetic_shapes(5, 60, 10, 10, 6).unwrap();
        for c in 0..6 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        for im in &ds.images {
            assert!(im.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(synthetic_shapes(0, 4, 8, 8, 1).is_err());
        assert!(synthetic_shapes(0, 4, 3, 8, 2).is_err());
    }
}
