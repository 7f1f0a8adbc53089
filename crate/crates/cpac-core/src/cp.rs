//! CP (CANDECOMP/PARAFAC) factorization of 4-way kernel tensors.
//!
//! A kernel `K` of shape `d x d x S x N` is represented as `R` groups of four
//! factor vectors; [`reconstruct`] sums the rank-one outer products back into
//! the dense kernel and [`cp_als`] fits the factors to a given tensor by
//! alternating least squares. Per-rank weights are absorbed into the factor
//! columns; [`normalize_factors`] rebalances column norms without changing
//! the reconstruction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CpacError, Result};
use crate::tensor::{unfold, Tensor};

/// The four factor matrices of one factorized kernel. Column `r` of each
/// matrix holds the rank-`r` group `(kx_r, ky_r, ks_r, kn_r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpFactorSet {
    /// `d x R`, kernel-row factors.
    pub factors_x: Tensor,
    /// `d x R`, kernel-column factors.
    pub factors_y: Tensor,
    /// `S x R`, input-channel factors.
    pub factors_s: Tensor,
    /// `N x R`, output-channel factors.
    pub factors_n: Tensor,
}

impl CpFactorSet {
    pub fn new(
        factors_x: Tensor,
        factors_y: Tensor,
        factors_s: Tensor,
        factors_n: Tensor,
    ) -> Result<Self> {
        let f = CpFactorSet {
            factors_x,
            factors_y,
            factors_s,
            factors_n,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            &self.factors_x,
            &self.factors_y,
            &self.factors_s,
            &self.factors_n,
        ];
        if all.iter().any(|m| m.order() != 2) {
            return Err(CpacError::shape("factor matrices must be order 2"));
        }
        let r = self.factors_x.extent(1);
        if r < 1 {
            return Err(CpacError::argument("rank must be >= 1"));
        }
        if all.iter().any(|m| m.extent(1) != r) {
            return Err(CpacError::shape(
                "all four factor matrices must share the same column count",
            ));
        }
        if self.factors_x.extent(0) != self.factors_y.extent(0) {
            return Err(CpacError::shape(
                "row factors and column factors must both have d rows",
            ));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.factors_x.extent(1)
    }

    /// `(d, S, N)` of the kernel this factor set reconstructs.
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.factors_x.extent(0),
            self.factors_s.extent(0),
            self.factors_n.extent(0),
        )
    }

    /// Exact parameter count `R * (d + d + S + N)`.
    pub fn param_count(&self) -> usize {
        let (d, s, n) = self.dims();
        self.rank() * (2 * d + s + n)
    }

    /// Column `r` of one factor matrix as an owned vector.
    pub fn column(matrix: &Tensor, r: usize) -> Tensor {
        let rows = matrix.extent(0);
        Tensor::vector(matrix.data()[r * rows..(r + 1) * rows].to_vec())
    }

    /// Concatenates the ranks of two factor sets over the same kernel shape.
    pub fn concat(&self, other: &CpFactorSet) -> Result<CpFactorSet> {
        if self.dims() != other.dims() {
            return Err(CpacError::shape("factor sets describe different kernels"));
        }
        let join = |a: &Tensor, b: &Tensor| {
            let rows = a.extent(0);
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::from_parts(vec![rows, a.extent(1) + b.extent(1)], data)
        };
        CpFactorSet::new(
            join(&self.factors_x, &other.factors_x)?,
            join(&self.factors_y, &other.factors_y)?,
            join(&self.factors_s, &other.factors_s)?,
            join(&self.factors_n, &other.factors_n)?,
        )
    }
}

/// Sums the rank-one terms back into the dense `d x d x S x N` kernel.
pub fn reconstruct(f: &CpFactorSet) -> Tensor {
    let (d, s, n) = f.dims();
    let r_total = f.rank();
    let mut out = Tensor::zeros(&[d, d, s, n]);
    let fx = f.factors_x.data();
    let fy = f.factors_y.data();
    let fs = f.factors_s.data();
    let fn_ = f.factors_n.data();
    for r in 0..r_total {
        for cn in 0..n {
            for cs in 0..s {
                let sn = fs[cs + s * r] * fn_[cn + n * r];
                for j in 0..d {
                    let ysn = fy[j + d * r] * sn;
                    for i in 0..d {
                        out.data_mut()[i + d * (j + d * (cs + s * cn))] += fx[i + d * r] * ysn;
                    }
                }
            }
        }
    }
    out
}

/// Relative Frobenius reconstruction error `|T - reconstruct(f)| / |T|`,
/// with `0/0` defined as `0`.
pub fn fit_error(t: &Tensor, f: &CpFactorSet) -> Result<f64> {
    let rec = reconstruct(f);
    if rec.shape() != t.shape() {
        return Err(CpacError::shape(format!(
            "factor set reconstructs {:?}, tensor is {:?}",
            rec.shape(),
            t.shape()
        )));
    }
    let norm_t = t.frobenius_norm();
    let mut diff = t.clone();
    diff.add_scaled(&rec, -1.0)?;
    let norm_diff = diff.frobenius_norm();
    if norm_t == 0.0 {
        return Ok(if norm_diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(norm_diff / norm_t)
}

/// Rebalances each rank's column norms across the four factor matrices (every
/// column scaled to the 4th root of the product of the four norms) without
/// changing the reconstruction. A rank with any zero column is left alone.
pub fn normalize_factors(f: &CpFactorSet) -> CpFactorSet {
    let mut out = f.clone();
    let rank = f.rank();
    for r in 0..rank {
        let norms: Vec<f64> = [&f.factors_x, &f.factors_y, &f.factors_s, &f.factors_n]
            .iter()
            .map(|m| CpFactorSet::column(m, r).frobenius_norm())
            .collect();
        let product: f64 = norms.iter().product();
        if product == 0.0 {
            continue;
        }
        let target = product.powf(0.25);
        for (m, norm) in [
            &mut out.factors_x,
            &mut out.factors_y,
            &mut out.factors_s,
            &mut out.factors_n,
        ]
        .into_iter()
        .zip(&norms)
        {
            let rows = m.extent(0);
            let scale = target / norm;
            for v in &mut m.data_mut()[r * rows..(r + 1) * rows] {
                *v *= scale;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct CpAlsOptions {
    pub max_iters: usize,
    /// Stop when the relative fit error changes by less than this between sweeps.
    pub tol: f64,
    pub seed: u64,
}

impl Default for CpAlsOptions {
    fn default() -> Self {
        CpAlsOptions {
            max_iters: 500,
            tol: 1e-14,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CpAlsOutcome {
    pub factors: CpFactorSet,
    /// Relative fit error after each sweep.
    pub error_trace: Vec<f64>,
    pub converged: bool,
}

/// Ridge added to the normal equations of every least-squares subproblem.
const ALS_RIDGE: f64 = 1e-10;

/// Alternating least squares CP factorization of a 4-way tensor.
///
/// Factors are initialized uniform in `[-1, 1]` from a seeded generator, so
/// the outcome is a pure function of `(t, rank, opts.seed)`. Each sweep
/// updates the four factors in mode order from the MTTKRP normal equations
/// with a ridge of `1e-10`, then rebalances column norms; the recorded error
/// trace is non-increasing.
pub fn cp_als(t: &Tensor, rank: usize, opts: CpAlsOptions) -> Result<CpAlsOutcome> {
    if rank < 1 {
        return Err(CpacError::argument("cp_als rank must be >= 1"));
    }
    if t.order() != 4 {
        return Err(CpacError::shape(format!(
            "cp_als expects an order-4 tensor, got order {}",
            t.order()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut factors: Vec<Tensor> = t
        .shape()
        .iter()
        .map(|&extent| {
            let data = (0..extent * rank).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_parts(vec![extent, rank], data).unwrap()
        })
        .collect();

    let unfoldings: Vec<Tensor> = (0..4).map(|k| unfold(t, k).unwrap()).collect();
    let mut grams: Vec<Tensor> = factors.iter().map(gram).collect();

    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iters {
        for k in 0..4 {
            let others: Vec<&Tensor> = (0..4).rev().filter(|&m| m != k).map(|m| &factors[m]).collect();
            let z = khatri_rao(&others);
            let mttkrp = unfoldings[k].matmul(&z)?;
            let mut v = Tensor::from_fn(&[rank, rank], |_| 1.0);
            for (m, g) in grams.iter().enumerate() {
                if m != k {
                    for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                        *vv *= gv;
                    }
                }
            }
            for i in 0..rank {
                v.data_mut()[i + rank * i] += ALS_RIDGE;
            }
            // A_k = M * V^-1, solved as V * A_k^T = M^T (V is symmetric PD)
            let solution = solve_linear(&v, &mttkrp.transpose()?)?;
            factors[k] = solution.transpose()?;
            grams[k] = gram(&factors[k]);
        }

        let set = CpFactorSet::new(
            factors[0].clone(),
            factors[1].clone(),
            factors[2].clone(),
            factors[3].clone(),
        )?;
        let balanced = normalize_factors(&set);
        factors = vec![
            balanced.factors_x.clone(),
            balanced.factors_y.clone(),
            balanced.factors_s.clone(),
            balanced.factors_n.clone(),
        ];
        grams = factors.iter().map(gram).collect();

        let err = fit_error(t, &balanced)?;
        let prev = trace.last().copied();
        trace.push(err);
        if let Some(prev) = prev {
            if (prev - err).abs() < opts.tol {
                converged = true;
                break;
            }
        }
        if err == 0.0 {
            converged = true;
            break;
        }
    }

    let factors = CpFactorSet::new(
        factors.remove(0),
        factors.remove(0),
        factors.remove(0),
        factors.remove(0),
    )?;
    Ok(CpAlsOutcome {
        factors,
        error_trace: trace,
        converged,
    })
}

fn gram(a: &Tensor) -> Tensor {
    a.transpose().unwrap().matmul(a).unwrap()
}

/// Columnwise Kronecker product. The first listed matrix varies slowest in
/// the result's rows, matching the column enumeration of [`unfold`] when the
/// matrices are listed in descending mode order.
fn khatri_rao(ms: &[&Tensor]) -> Tensor {
    let rank = ms[0].extent(1);
    let rows: usize = ms.iter().map(|m| m.extent(0)).product();
    let mut out = Tensor::zeros(&[rows, rank]);
    for r in 0..rank {
        let mut col = vec![1.0];
        for m in ms {
            let rows_m = m.extent(0);
            let factor = &m.data()[r * rows_m..(r + 1) * rows_m];
            let mut next = Vec::with_capacity(col.len() * rows_m);
            for &c in &col {
                for &f in factor {
                    next.push(c * f);
                }
            }
            col = next;
        }
        out.data_mut()[r * rows..(r + 1) * rows].copy_from_slice(&col);
    }
    out
}

/// Solves `A X = B` for square `A` by LU with partial pivoting.
fn solve_linear(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.extent(0);
    if a.extent(1) != n || b.extent(0) != n {
        return Err(CpacError::shape("solve_linear shape mismatch"));
    }
    let cols = b.extent(1);
    let mut lu: Vec<f64> = a.data().to_vec();
    let mut x: Vec<f64> = b.data().to_vec();
    let at = |m: &Vec<f64>, i: usize, j: usize| m[i + n * j];

    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut pivot = k;
        let mut best = at(&lu, k, k).abs();
        for i in k + 1..n {
            if at(&lu, i, k).abs() > best {
                best = at(&lu, i, k).abs();
                pivot = i;
            }
        }
        if best == 0.0 {
            return Err(CpacError::argument("singular system in solve_linear"));
        }
        if pivot != k {
            for j in 0..n {
                lu.swap(k + n * j, pivot + n * j);
            }
            for j in 0..cols {
                x.swap(k + n * j, pivot + n * j);
            }
            perm.swap(k, pivot);
        }
        let diag = at(&lu, k, k);
        for i in k + 1..n {
            let factor = at(&lu, i, k) / diag;
            lu[i + n * k] = factor;
            for j in k + 1..n {
                lu[i + n * j] -= factor * at(&lu, k, j);
            }
        }
    }
    for col in 0..cols {
        // forward substitution with unit lower triangle
        for i in 1..n {
            let mut acc = x[i + n * col];
            for j in 0..i {
                acc -= at(&lu, i, j) * x[j + n * col];
            }
            x[i + n * col] = acc;
        }
        // back substitution
        for i in (0..n).rev() {
            let mut acc = x[i + n * col];
            for j in i + 1..n {
                acc -= at(&lu, i, j) * x[j + n * col];
            }
            x[i + n * col] = acc / at(&lu, i, i);
        }
    }
    Tensor::from_parts(vec![n, cols], x)
}
