//! Seeded subsetting and batch iteration. Subsets are stratified so class
//! proportions track the source; batches cover each sample exactly once per
//! epoch, last short batch included.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{CpacError, Result};

/// Draws `n` samples preserving class proportions (largest-remainder
/// apportionment, per-class seeded shuffle, then a final shuffle).
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(CpacError::argument(format!(
            "subset of {n} requested from {} samples",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &label) in ds.labels.iter().enumerate() {
        by_class[label].push(i);
    }
    // integer apportionment: floor of each share, then distribute the
    // remainder by largest fractional part (ties broken by class index)
    let total = ds.len().max(1);
    let mut take: Vec<usize> = by_class
        .iter()
        .map(|ids| ids.len() * n / total)
        .collect();
    let mut fracs: Vec<(usize, f64)> = by_class
        .iter()
        .enumerate()
        .map(|(c, ids)| {
            let exact = ids.len() as f64 * n as f64 / total as f64;
            (c, exact - exact.floor())
        })
        .collect();
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut short = n - take.iter().sum::<usize>();
    for &(c, _) in fracs.iter().cycle() {
        if short == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            short -= 1;
        }
    }

    let mut picked = Vec::with_capacity(n);
    for (ids, &k) in by_class.iter_mut().zip(&take) {
        ids.shuffle(&mut rng);
        picked.extend_from_slice(&ids[..k]);
    }
    picked.shuffle(&mut rng);
    ds.select(&picked, &format!("stratified subset n={n} seed={seed}"))
}

/// Seeded-shuffle batch iterator over sample indices. Every sample appears
/// exactly once; the final batch may be short.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(CpacError::argument("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
