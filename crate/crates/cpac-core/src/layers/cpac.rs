//! The factorized convolution layer.
//!
//! Forward: with `patches` the `d x d x S x P` expansion of the input, the
//! `P x N` output is
//!
//! ```text
//! out = sum_r (((patches x_2 ks_r) x_1 ky_r) x_0 kx_r) outer kn_r
//! ```
//!
//! where `x_k` contracts mode `k` away. The per-rank intermediates are kept
//! for backward:
//!
//! ```text
//! a_full = patches x_2 ks_r        (d x d x P)
//! a2     = a_full  x_1 ky_r        (d x P)
//! a1     = a2      x_0 kx_r        (P)
//! b2     = kx_r * kn_r^T           (d x N)
//! ```
//!
//! Backward comes in two flavors that must agree: a naive path that
//! materializes the closed-form derivative matrices
//!
//! ```text
//! d out / d kn_r = I_N (x) a1^T                                  (N x PN)
//! d out / d kx_r = kn_r^T (x) a2                                 (d x PN)
//! d out / d ky_r = A_(1) (B2 (x) I_P)                            (d x PN)
//! d out / d ks_r = U_(2) (ky_r (x) I_dP) (B2 (x) I_P)            (S x PN)
//! ```
//!
//! with `(x)` the Kronecker product and `A_(1)` / `U_(2)` the unfoldings of
//! `a_full` / `patches` along the contracted mode whose columns enumerate the
//! remaining modes patch-block first (see `unfold_y_patch_major`), and a fast
//! path that applies the same linear maps as mode contractions without ever
//! materializing a Kronecker product. Gradients follow the convention
//! `vec(dL/dtheta) = (dout/dtheta) * vec(dL/dout)`; `vec` is column stacking.
//!
//! Only the fast path runs in training; the naive path exists so the closed
//! forms can be checked literally against finite differences.

use serde::{Deserialize, Serialize};

use crate::cp::CpFactorSet;
use crate::error::{CpacError, Result};
use crate::tensor::{kron, mode_mul_vec, outer, vec_of, ShapeDescriptor, Tensor};

/// Per-rank contraction intermediates cached by the forward pass.
#[derive(Debug, Clone)]
pub struct RankCache {
    /// `d x d x P`, patches contracted with the channel factor.
    pub a_full: Tensor,
    /// `d x P`, additionally contracted with the y factor.
    pub a2: Tensor,
    /// Length `P`, fully contracted spatial term.
    pub a1: Tensor,
}

/// Everything backward needs from one forward call.
#[derive(Debug, Clone)]
pub struct CpacCache {
    /// The `d x d x S x P` patch-expanded input.
    pub patches: Tensor,
    pub ranks: Vec<RankCache>,
}

/// Gradients of a scalar loss w.r.t. the factor matrices and the layer input.
#[derive(Debug, Clone)]
pub struct CpacGradients {
    pub grad_x: Tensor,
    pub grad_y: Tensor,
    pub grad_s: Tensor,
    pub grad_n: Tensor,
    /// `d x d x S x P` cotangent of the patch-expanded input.
    pub grad_input: Tensor,
}

fn check_patches(patches: &Tensor, factors: &CpFactorSet) -> Result<()> {
    let (d, s, _) = factors.dims();
    if patches.order() != 4 || patches.extent(0) != d || patches.extent(1) != d
        || patches.extent(2) != s
    {
        return Err(CpacError::shape(format!(
            "patch tensor {:?} does not match factors with d={d}, s={s}",
            patches.shape()
        )));
    }
    Ok(())
}

/// Forward pass over a patch-expanded input. Returns the `P x N` output and
/// the cache backward consumes.
pub fn cpac_forward(patches: &Tensor, factors: &CpFactorSet) -> Result<(Tensor, CpacCache)> {
    check_patches(patches, factors)?;
    let (_, _, n) = factors.dims();
    let p_total = patches.extent(3);
    let rank = factors.rank();
    let mut out = Tensor::zeros(&[p_total, n]);
    let mut ranks = Vec::with_capacity(rank);
    for r in 0..rank {
        let ks = CpFactorSet::column(&factors.factors_s, r);
        let ky = CpFactorSet::column(&factors.factors_y, r);
        let kx = CpFactorSet::column(&factors.factors_x, r);
        let kn = CpFactorSet::column(&factors.factors_n, r);
        let a_full = mode_mul_vec(patches, &ks, 2)?;
        let a2 = mode_mul_vec(&a_full, &ky, 1)?;
        let a1 = mode_mul_vec(&a2, &kx, 0)?;
        for ch in 0..n {
            let w = kn.data()[ch];
            let dst = &mut out.data_mut()[ch * p_total..(ch + 1) * p_total];
            for (o, a) in dst.iter_mut().zip(a1.data()) {
                *o += w * a;
            }
        }
        ranks.push(RankCache { a_full, a2, a1 });
    }
    Ok((
        out,
        CpacCache {
            patches: patches.clone(),
            ranks,
        },
    ))
}

/// Forward pass without building the cache; for evaluation paths that never
/// run backward.
pub fn cpac_apply(patches: &Tensor, factors: &CpFactorSet) -> Result<Tensor> {
    check_patches(patches, factors)?;
    let (_, _, n) = factors.dims();
    let p_total = patches.extent(3);
    let mut out = Tensor::zeros(&[p_total, n]);
    for r in 0..factors.rank() {
        let ks = CpFactorSet::column(&factors.factors_s, r);
        let ky = CpFactorSet::column(&factors.factors_y, r);
        let kx = CpFactorSet::column(&factors.factors_x, r);
        let kn = CpFactorSet::column(&factors.factors_n, r);
        let a_full = mode_mul_vec(patches, &ks, 2)?;
        let a2 = mode_mul_vec(&a_full, &ky, 1)?;
        let a1 = mode_mul_vec(&a2, &kx, 0)?;
        for ch in 0..n {
            let w = kn.data()[ch];
            let dst = &mut out.data_mut()[ch * p_total..(ch + 1) * p_total];
            for (o, a) in dst.iter_mut().zip(a1.data()) {
                *o += w * a;
            }
        }
    }
    Ok(out)
}

fn check_grad_out(cache: &CpacCache, factors: &CpFactorSet, grad_out: &Tensor) -> Result<()> {
    let (_, _, n) = factors.dims();
    let p_total = cache.patches.extent(3);
    if grad_out.order() != 2 || grad_out.extent(0) != p_total || grad_out.extent(1) != n {
        return Err(CpacError::shape(format!(
            "upstream gradient {:?} does not match output {p_total} x {n}",
            grad_out.shape()
        )));
    }
    Ok(())
}

/// Fast backward pass: factor and input gradients via mode contractions.
pub fn cpac_backward(
    cache: &CpacCache,
    factors: &CpFactorSet,
    grad_out: &Tensor,
) -> Result<CpacGradients> {
    check_grad_out(cache, factors, grad_out)?;
    let (d, s, n) = factors.dims();
    let p_total = cache.patches.extent(3);
    let rank = factors.rank();
    let mut grad_x = Tensor::zeros(&[d, rank]);
    let mut grad_y = Tensor::zeros(&[d, rank]);
    let mut grad_s = Tensor::zeros(&[s, rank]);
    let mut grad_n = Tensor::zeros(&[n, rank]);
    let mut grad_input = Tensor::zeros(cache.patches.shape());
    for r in 0..rank {
        let rc = &cache.ranks[r];
        let kx = CpFactorSet::column(&factors.factors_x, r);
        let ky = CpFactorSet::column(&factors.factors_y, r);
        let ks = CpFactorSet::column(&factors.factors_s, r);
        let kn = CpFactorSet::column(&factors.factors_n, r);

        // dL/dkn = G^T a1
        let gn = mat_vec_t(grad_out, &rc.a1);
        grad_n.data_mut()[r * n..(r + 1) * n].copy_from_slice(gn.data());

        // t = G kn collapses the output channels once for the other three
        let t = mat_vec(grad_out, &kn);

        // dL/dkx = a2 t
        let gx = mat_vec(&rc.a2, &t);
        grad_x.data_mut()[r * d..(r + 1) * d].copy_from_slice(gx.data());

        // dL/dky = (a_full x_0 kx) t
        let ax = mode_mul_vec(&rc.a_full, &kx, 0)?;
        let gy = mat_vec(&ax, &t);
        grad_y.data_mut()[r * d..(r + 1) * d].copy_from_slice(gy.data());

        // dL/dks = ((patches x_0 kx) x_0 ky) t
        let px = mode_mul_vec(&cache.patches, &kx, 0)?;
        let pxy = mode_mul_vec(&px, &ky, 0)?;
        let gs = mat_vec(&pxy, &t);
        grad_s.data_mut()[r * s..(r + 1) * s].copy_from_slice(gs.data());

        // adjoint of the multilinear forward map: rank-one scatter onto input
        for p in 0..p_total {
            let tv = t.data()[p];
            if tv == 0.0 {
                continue;
            }
            for cs in 0..s {
                let sv = ks.data()[cs] * tv;
                for j in 0..d {
                    let yv = ky.data()[j] * sv;
                    let base = d * (j + d * (cs + s * p));
                    for i in 0..d {
                        grad_input.data_mut()[i + base] += kx.data()[i] * yv;
                    }
                }
            }
        }
    }
    Ok(CpacGradients {
        grad_x,
        grad_y,
        grad_s,
        grad_n,
        grad_input,
    })
}

/// Naive backward pass: factor gradients via the materialized derivative
/// matrices applied to `vec(grad_out)`. Input gradient is shared with the
/// fast path (it has no closed-form counterpart to materialize).
pub fn cpac_backward_naive(
    cache: &CpacCache,
    factors: &CpFactorSet,
    grad_out: &Tensor,
) -> Result<CpacGradients> {
    check_grad_out(cache, factors, grad_out)?;
    let (d, s, n) = factors.dims();
    let rank = factors.rank();
    let g_vec = vec_of(grad_out)?;
    let g_col = Tensor::matrix(g_vec.len(), 1, g_vec.into_data())?;
    let mut grad_x = Tensor::zeros(&[d, rank]);
    let mut grad_y = Tensor::zeros(&[d, rank]);
    let mut grad_s = Tensor::zeros(&[s, rank]);
    let mut grad_n = Tensor::zeros(&[n, rank]);
    for r in 0..rank {
        let apply = |m: &Tensor| -> Result<Vec<f64>> {
            Ok(m.matmul(&g_col)?.into_data())
        };
        grad_n.data_mut()[r * n..(r + 1) * n]
            .copy_from_slice(&apply(&grad_kn_matrix(cache, factors, r)?)?);
        grad_x.data_mut()[r * d..(r + 1) * d]
            .copy_from_slice(&apply(&grad_kx_matrix(cache, factors, r)?)?);
        grad_y.data_mut()[r * d..(r + 1) * d]
            .copy_from_slice(&apply(&grad_ky_matrix(cache, factors, r)?)?);
        grad_s.data_mut()[r * s..(r + 1) * s]
            .copy_from_slice(&apply(&grad_ks_matrix(cache, factors, r)?)?);
    }
    let grad_input = cpac_backward(cache, factors, grad_out)?.grad_input;
    Ok(CpacGradients {
        grad_x,
        grad_y,
        grad_s,
        grad_n,
        grad_input,
    })
}

/// `d out / d kn_r = I_N (x) a1^T`, shape `N x (P*N)`.
pub fn grad_kn_matrix(cache: &CpacCache, factors: &CpFactorSet, r: usize) -> Result<Tensor> {
    check_rank(cache, factors, r)?;
    let a1 = &cache.ranks[r].a1;
    let (_, _, n) = factors.dims();
    let a1_row = Tensor::matrix(1, a1.len(), a1.data().to_vec())?;
    kron(&Tensor::identity(n), &a1_row)
}

/// `d out / d kx_r = kn_r^T (x) a2`, shape `d x (P*N)`.
pub fn grad_kx_matrix(cache: &CpacCache, factors: &CpFactorSet, r: usize) -> Result<Tensor> {
    check_rank(cache, factors, r)?;
    let (_, _, n) = factors.dims();
    let kn = CpFactorSet::column(&factors.factors_n, r);
    let kn_row = Tensor::matrix(1, n, kn.into_data())?;
    kron(&kn_row, &cache.ranks[r].a2)
}

/// `d out / d ky_r = A_(1) (B2 (x) I_P)`, shape `d x (P*N)`, with `A_(1)` the
/// patch-major mode-1 unfolding of `a_full` and `B2 = kx_r kn_r^T`.
pub fn grad_ky_matrix(cache: &CpacCache, factors: &CpFactorSet, r: usize) -> Result<Tensor> {
    check_rank(cache, factors, r)?;
    let p_total = cache.patches.extent(3);
    let kx = CpFactorSet::column(&factors.factors_x, r);
    let kn = CpFactorSet::column(&factors.factors_n, r);
    let b2 = outer(&kx, &kn)?;
    let a_unf = unfold_y_patch_major(&cache.ranks[r].a_full);
    a_unf.matmul(&kron(&b2, &Tensor::identity(p_total))?)
}

/// `d out / d ks_r = U_(2) (ky_r (x) I_dP) (B2 (x) I_P)`, shape `S x (P*N)`,
/// with `U_(2)` the patch-major mode-2 unfolding of the patch tensor.
pub fn grad_ks_matrix(cache: &CpacCache, factors: &CpFactorSet, r: usize) -> Result<Tensor> {
    check_rank(cache, factors, r)?;
    let (d, _, _) = factors.dims();
    let p_total = cache.patches.extent(3);
    let kx = CpFactorSet::column(&factors.factors_x, r);
    let ky = CpFactorSet::column(&factors.factors_y, r);
    let kn = CpFactorSet::column(&factors.factors_n, r);
    let b2 = outer(&kx, &kn)?;
    let u_unf = unfold_s_patch_major(&cache.patches);
    let ky_col = Tensor::matrix(d, 1, ky.into_data())?;
    let first = kron(&ky_col, &Tensor::identity(d * p_total))?;
    let second = kron(&b2, &Tensor::identity(p_total))?;
    u_unf.matmul(&first)?.matmul(&second)
}

fn check_rank(cache: &CpacCache, factors: &CpFactorSet, r: usize) -> Result<()> {
    if r >= factors.rank() || r >= cache.ranks.len() {
        return Err(CpacError::argument(format!(
            "rank index {r} out of range for rank {}",
            factors.rank()
        )));
    }
    Ok(())
}

/// Mode-1 unfolding of a `d x d x P` tensor with patch-major columns:
/// `out(b, a*P + p) = t(a, b, p)`.
///
/// The column order differs from [`crate::tensor::unfold`] (which cycles the
/// lowest remaining mode fastest): here column blocks are indexed by the
/// first spatial mode and run over patches inside each block, which is
/// exactly how the row blocks of `B2 (x) I_P` are laid out. With this order
/// the closed-form derivative products hold literally.
fn unfold_y_patch_major(t: &Tensor) -> Tensor {
    let (d0, d1, p_total) = (t.extent(0), t.extent(1), t.extent(2));
    let mut out = Tensor::zeros(&[d1, d0 * p_total]);
    for p in 0..p_total {
        for b in 0..d1 {
            for a in 0..d0 {
                out.data_mut()[b + d1 * (a * p_total + p)] =
                    t.data()[a + d0 * (b + d1 * p)];
            }
        }
    }
    out
}

/// Mode-2 unfolding of a `d x d x S x P` tensor with patch-major columns:
/// `out(s, b*d*P + a*P + p) = t(a, b, s, p)`. See [`unfold_y_patch_major`].
fn unfold_s_patch_major(t: &Tensor) -> Tensor {
    let (d0, d1, s_total, p_total) = (t.extent(0), t.extent(1), t.extent(2), t.extent(3));
    let mut out = Tensor::zeros(&[s_total, d0 * d1 * p_total]);
    for p in 0..p_total {
        for s in 0..s_total {
            for b in 0..d1 {
                for a in 0..d0 {
                    out.data_mut()[s + s_total * (b * d0 * p_total + a * p_total + p)] =
                        t.data()[a + d0 * (b + d1 * (s + s_total * p))];
                }
            }
        }
    }
    out
}

/// `M v` for an order-2 `M` and order-1 `v`.
fn mat_vec(m: &Tensor, v: &Tensor) -> Tensor {
    let (rows, cols) = (m.extent(0), m.extent(1));
    debug_assert_eq!(cols, v.len());
    let mut out = vec![0.0; rows];
    for j in 0..cols {
        let vj = v.data()[j];
        let col = &m.data()[j * rows..(j + 1) * rows];
        for i in 0..rows {
            out[i] += col[i] * vj;
        }
    }
    Tensor::vector(out)
}

/// `M^T v` without forming the transpose.
fn mat_vec_t(m: &Tensor, v: &Tensor) -> Tensor {
    let (rows, cols) = (m.extent(0), m.extent(1));
    debug_assert_eq!(rows, v.len());
    let mut out = vec![0.0; cols];
    for (j, o) in out.iter_mut().enumerate() {
        let col = &m.data()[j * rows..(j + 1) * rows];
        let mut acc = 0.0;
        for i in 0..rows {
            acc += col[i] * v.data()[i];
        }
        *o = acc;
    }
    Tensor::vector(out)
}

/// A factorized convolution layer with its cache-between-passes contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpacLayerState {
    pub shape: ShapeDescriptor,
    pub factors: CpFactorSet,
    #[serde(skip)]
    cache: Option<CpacCache>,
    #[serde(skip, default = "stale_default")]
    stale: bool,
}

fn stale_default() -> bool {
    true
}

impl CpacLayerState {
    pub fn new(shape: ShapeDescriptor, factors: CpFactorSet) -> Result<Self> {
        shape.validate()?;
        factors.validate()?;
        let (d, s, n) = factors.dims();
        if d != shape.d || s != shape.s || n != shape.n {
            return Err(CpacError::shape(format!(
                "factor dims (d={d}, s={s}, n={n}) do not match layer shape \
                 (d={}, s={}, n={})",
                shape.d, shape.s, shape.n
            )));
        }
        Ok(CpacLayerState {
            shape,
            factors,
            cache: None,
            stale: true,
        })
    }

    /// Pure forward, no cache stored; used for evaluation.
    pub fn forward(&self, patches: &Tensor) -> Result<Tensor> {
        cpac_apply(patches, &self.factors)
    }

    /// Forward that stores the cache for a following [`Self::backward`].
    pub fn forward_cached(&mut self, patches: &Tensor) -> Result<Tensor> {
        let (out, cache) = cpac_forward(patches, &self.factors)?;
        self.cache = Some(cache);
        self.stale = false;
        Ok(out)
    }

    /// Cache of the last forward; errors once backward has consumed it.
    pub fn cache(&self) -> Result<&CpacCache> {
        match (&self.cache, self.stale) {
            (Some(c), false) => Ok(c),
            (Some(_), true) => Err(CpacError::state(
                "layer cache is stale: backward already consumed this forward",
            )),
            (None, _) => Err(CpacError::state("no forward pass recorded")),
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<CpacGradients> {
        let grads = cpac_backward(self.cache()?, &self.factors, grad_out)?;
        self.stale = true;
        Ok(grads)
    }

    pub fn grad_wrt_kn(&self, r: usize) -> Result<Tensor> {
        grad_kn_matrix(self.cache()?, &self.factors, r)
    }

    pub fn grad_wrt_kx(&self, r: usize) -> Result<Tensor> {
        grad_kx_matrix(self.cache()?, &self.factors, r)
    }

    pub fn grad_wrt_ky(&self, r: usize) -> Result<Tensor> {
        grad_ky_matrix(self.cache()?, &self.factors, r)
    }

    pub fn grad_wrt_ks(&self, r: usize) -> Result<Tensor> {
        grad_ks_matrix(self.cache()?, &self.factors, r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::reconstruct;
    use crate::layers::conv_forward_reference;
    use crate::tensor::{flatten_output, fold_output, patch_expand};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn random_factors(
        rng: &mut ChaCha8Rng,
        d: usize,
        s: usize,
        n: usize,
        r: usize,
    ) -> CpFactorSet {
        CpFactorSet::new(
            random_tensor(rng, &[d, r]),
            random_tensor(rng, &[d, r]),
            random_tensor(rng, &[s, r]),
            random_tensor(rng, &[n, r]),
        )
        .unwrap()
    }

    /// Scalar-loop evaluation of the forward sum, association order matching
    /// the contraction chain: channels innermost, then y, then x, ranks last.
    fn scalar_forward(u: &Tensor, f: &CpFactorSet, d: usize) -> Tensor {
        let (x_in, y_in, s_in) = (u.extent(0), u.extent(1), u.extent(2));
        let (out_x, out_y) = (x_in - d + 1, y_in - d + 1);
        let n = f.factors_n.extent(0);
        let mut vt = Tensor::zeros(&[out_x * out_y, n]);
        for x in 0..out_x {
            for y in 0..out_y {
                let p = x * out_y + y;
                for ch in 0..n {
                    let mut acc = 0.0;
                    for r in 0..f.rank() {
                        let mut s1 = 0.0;
                        for i in 0..d {
                            let mut s2 = 0.0;
                            for j in 0..d {
                                let mut s3 = 0.0;
                                for s in 0..s_in {
                                    s3 += u.at(&[x + i, y + j, s])
                                        * f.factors_s.at(&[s, r]);
                                }
                                s2 += s3 * f.factors_y.at(&[j, r]);
                            }
                            s1 += s2 * f.factors_x.at(&[i, r]);
                        }
                        acc += f.factors_n.at(&[ch, r]) * s1;
                    }
                    vt.set(&[p, ch], acc);
                }
            }
        }
        vt
    }

    #[test]
    fn zero_factors_give_zero_output() {
        let factors = CpFactorSet::new(
            Tensor::zeros(&[2, 1]),
            Tensor::zeros(&[2, 1]),
            Tensor::zeros(&[2, 1]),
            Tensor::zeros(&[3, 1]),
        )
        .unwrap();
        let patches = Tensor::from_fn(&[2, 2, 2, 4], |_| 1.0);
        let (out, _) = cpac_forward(&patches, &factors).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_equals_reference_convolution_with_reconstructed_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..20 {
            let d = rng.gen_range(1..=3);
            let s = rng.gen_range(1..=3);
            let n = rng.gen_range(1..=4);
            let x_in = rng.gen_range(d..=6);
            let y_in = rng.gen_range(d..=6);
            let r = rng.gen_range(1..=3);
            let u = random_tensor(&mut rng, &[x_in, y_in, s]);
            let f = random_factors(&mut rng, d, s, n, r);
            let patches = patch_expand(&u, d).unwrap();
            let (vt, _) = cpac_forward(&patches, &f).unwrap();
            let spatial = fold_output(&vt, x_in, y_in, d).unwrap();
            let reference = conv_forward_reference(&u, &reconstruct(&f)).unwrap();
            assert!(spatial.max_abs_diff(&reference) < 1e-9);
        }
    }

    #[test]
    fn forward_is_bit_identical_to_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let u = random_tensor(&mut rng, &[5, 5, 2]);
        let f = random_factors(&mut rng, 3, 2, 4, 2);
        let patches = patch_expand(&u, 3).unwrap();
        let (vt, _) = cpac_forward(&patches, &f).unwrap();
        let scalar = scalar_forward(&u, &f, 3);
        assert_eq!(vt.data(), scalar.data());
    }

    #[test]
    fn forward_is_linear_in_input_and_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let f = random_factors(&mut rng, 2, 2, 3, 2);
        let p1 = random_tensor(&mut rng, &[2, 2, 2, 6]);
        let p2 = random_tensor(&mut rng, &[2, 2, 2, 6]);
        let (v1, _) = cpac_forward(&p1, &f).unwrap();
        let (v2, _) = cpac_forward(&p2, &f).unwrap();
        let mut sum = p1.clone();
        sum.add_scaled(&p2, 1.0).unwrap();
        let (v12, _) = cpac_forward(&sum, &f).unwrap();
        let mut expect = v1.clone();
        expect.add_scaled(&v2, 1.0).unwrap();
        assert!(v12.max_abs_diff(&expect) < 1e-12);

        // superposition in one factor: doubling kx doubles the output of that rank
        let mut f2 = f.clone();
        f2.factors_x.scale(2.0);
        let (vd, _) = cpac_forward(&p1, &f2).unwrap();
        let mut twice = v1.clone();
        twice.scale(2.0);
        assert!(vd.max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn rank_additivity_of_concatenated_factor_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let f1 = random_factors(&mut rng, 2, 2, 3, 2);
        let f2 = random_factors(&mut rng, 2, 2, 3, 3);
        let patches = random_tensor(&mut rng, &[2, 2, 2, 9]);
        let (v1, _) = cpac_forward(&patches, &f1).unwrap();
        let (v2, _) = cpac_forward(&patches, &f2).unwrap();
        let (vj, _) = cpac_forward(&patches, &f1.concat(&f2).unwrap()).unwrap();
        let mut want = v1.clone();
        want.add_scaled(&v2, 1.0).unwrap();
        assert!(vj.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn derivative_matrices_have_convention_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for (d, s, n, px, py, r) in [(1, 1, 1, 2, 2, 1), (2, 2, 3, 4, 3, 2), (3, 1, 4, 5, 5, 3)] {
            let u = random_tensor(&mut rng, &[px, py, s]);
            let patches = patch_expand(&u, d).unwrap();
            let f = random_factors(&mut rng, d, s, n, r);
            let (_, cache) = cpac_forward(&patches, &f).unwrap();
            let p_total = (px - d + 1) * (py - d + 1);
            for rr in 0..r {
                assert_eq!(
                    grad_kn_matrix(&cache, &f, rr).unwrap().shape(),
                    &[n, p_total * n]
                );
                assert_eq!(
                    grad_kx_matrix(&cache, &f, rr).unwrap().shape(),
                    &[d, p_total * n]
                );
                assert_eq!(
                    grad_ky_matrix(&cache, &f, rr).unwrap().shape(),
                    &[d, p_total * n]
                );
                assert_eq!(
                    grad_ks_matrix(&cache, &f, rr).unwrap().shape(),
                    &[s, p_total * n]
                );
            }
        }
    }

    #[test]
    fn zero_intermediates_give_zero_matrices() {
        let d = 2;
        let factors = CpFactorSet::new(
            Tensor::zeros(&[d, 1]),
            Tensor::zeros(&[d, 1]),
            Tensor::zeros(&[2, 1]),
            Tensor::zeros(&[3, 1]),
        )
        .unwrap();
        let patches = Tensor::zeros(&[d, d, 2, 4]);
        let (_, cache) = cpac_forward(&patches, &factors).unwrap();
        for m in [
            grad_kn_matrix(&cache, &factors, 0).unwrap(),
            grad_kx_matrix(&cache, &factors, 0).unwrap(),
            grad_ky_matrix(&cache, &factors, 0).unwrap(),
            grad_ks_matrix(&cache, &factors, 0).unwrap(),
        ] {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    /// Central finite differences of `<grad_out, forward(factors)>` w.r.t.
    /// one factor matrix entry.
    fn fd_factor_grad(
        patches: &Tensor,
        factors: &CpFactorSet,
        grad_out: &Tensor,
        pick: impl Fn(&mut CpFactorSet) -> &mut Tensor,
        idx: usize,
    ) -> f64 {
        let h = 1e-5;
        let mut plus = factors.clone();
        pick(&mut plus).data_mut()[idx] += h;
        let mut minus = factors.clone();
        pick(&mut minus).data_mut()[idx] -= h;
        let lp = cpac_forward(patches, &plus).unwrap().0.dot(grad_out);
        let lm = cpac_forward(patches, &minus).unwrap().0.dot(grad_out);
        (lp - lm) / (2.0 * h)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-8)
    }

    #[test]
    fn all_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        for (d, s, n, px, py, r) in [(2, 2, 3, 4, 4, 1), (3, 2, 4, 5, 5, 2), (1, 3, 2, 3, 4, 2)] {
            let u = random_tensor(&mut rng, &[px, py, s]);
            let patches = patch_expand(&u, d).unwrap();
            let f = random_factors(&mut rng, d, s, n, r);
            let p_total = (px - d + 1) * (py - d + 1);
            let grad_out = random_tensor(&mut rng, &[p_total, n]);
            let (_, cache) = cpac_forward(&patches, &f).unwrap();
            let grads = cpac_backward(&cache, &f, &grad_out).unwrap();

            let cases: [(&Tensor, fn(&mut CpFactorSet) -> &mut Tensor, usize); 4] = [
                (&grads.grad_x, |f| &mut f.factors_x, d),
                (&grads.grad_y, |f| &mut f.factors_y, d),
                (&grads.grad_s, |f| &mut f.factors_s, s),
                (&grads.grad_n, |f| &mut f.factors_n, n),
            ];
            for (analytic, pick, rows) in cases {
                let mut fd = vec![0.0; rows * r];
                for (i, slot) in fd.iter_mut().enumerate() {
                    *slot = fd_factor_grad(&patches, &f, &grad_out, pick, i);
                }
                assert!(
                    rel_err(analytic.data(), &fd) < 1e-6,
                    "gradient mismatch at d={d}, s={s}, n={n}, r={r}"
                );
            }

            // input gradient
            let mut fd_in = vec![0.0; patches.len()];
            let h = 1e-5;
            for (i, slot) in fd_in.iter_mut().enumerate() {
                let mut plus = patches.clone();
                plus.data_mut()[i] += h;
                let mut minus = patches.clone();
                minus.data_mut()[i] -= h;
                let lp = cpac_forward(&plus, &f).unwrap().0.dot(&grad_out);
                let lm = cpac_forward(&minus, &f).unwrap().0.dot(&grad_out);
                *slot = (lp - lm) / (2.0 * h);
            }
            assert!(rel_err(grads.grad_input.data(), &fd_in) < 1e-6);
        }
    }

    #[test]
    fn naive_and_fast_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        for (d, s, n, px, py, r) in [(2, 2, 3, 4, 4, 2), (3, 3, 4, 6, 5, 3), (1, 1, 1, 2, 2, 1)] {
            let u = random_tensor(&mut rng, &[px, py, s]);
            let patches = patch_expand(&u, d).unwrap();
            let f = random_factors(&mut rng, d, s, n, r);
            let p_total = (px - d + 1) * (py - d + 1);
            let grad_out = random_tensor(&mut rng, &[p_total, n]);
            let (_, cache) = cpac_forward(&patches, &f).unwrap();
            let fast = cpac_backward(&cache, &f, &grad_out).unwrap();
            let naive = cpac_backward_naive(&cache, &f, &grad_out).unwrap();
            assert!(fast.grad_x.max_abs_diff(&naive.grad_x) < 1e-10);
            assert!(fast.grad_y.max_abs_diff(&naive.grad_y) < 1e-10);
            assert!(fast.grad_s.max_abs_diff(&naive.grad_s) < 1e-10);
            assert!(fast.grad_n.max_abs_diff(&naive.grad_n) < 1e-10);
        }
    }

    #[test]
    fn derivative_matrix_times_vec_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let (d, s, n, px, py, r) = (2, 2, 3, 4, 3, 2);
        let u = random_tensor(&mut rng, &[px, py, s]);
        let patches = patch_expand(&u, d).unwrap();
        let f = random_factors(&mut rng, d, s, n, r);
        let p_total = (px - d + 1) * (py - d + 1);
        let grad_out = random_tensor(&mut rng, &[p_total, n]);
        let g_col = Tensor::matrix(p_total * n, 1, vec_of(&grad_out).unwrap().into_data()).unwrap();
        let (_, cache) = cpac_forward(&patches, &f).unwrap();
        for rr in 0..r {
            let via_matrix = grad_ky_matrix(&cache, &f, rr).unwrap().matmul(&g_col).unwrap();
            let mut fd = vec![0.0; d];
            for (j, slot) in fd.iter_mut().enumerate() {
                *slot = fd_factor_grad(&patches, &f, &grad_out, |f| &mut f.factors_y, rr * d + j);
            }
            assert!(rel_err(via_matrix.data(), &fd) < 1e-6);
        }
    }

    #[test]
    fn backward_with_zero_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let u = random_tensor(&mut rng, &[4, 4, 2]);
        let patches = patch_expand(&u, 3).unwrap();
        let f = random_factors(&mut rng, 3, 2, 2, 2);
        let (_, cache) = cpac_forward(&patches, &f).unwrap();
        let grads = cpac_backward(&cache, &f, &Tensor::zeros(&[4, 2])).unwrap();
        for t in [
            &grads.grad_x,
            &grads.grad_y,
            &grads.grad_s,
            &grads.grad_n,
            &grads.grad_input,
        ] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stateful_layer_enforces_cache_freshness() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let shape = ShapeDescriptor::new(4, 4, 2, 3, 2).unwrap();
        let f = random_factors(&mut rng, 2, 2, 3, 2);
        let mut layer = CpacLayerState::new(shape, f).unwrap();
        let u = random_tensor(&mut rng, &[4, 4, 2]);
        let patches = patch_expand(&u, 2).unwrap();
        let grad_out = random_tensor(&mut rng, &[9, 3]);

        assert!(layer.backward(&grad_out).is_err());
        assert!(layer.grad_wrt_kn(0).is_err());

        layer.forward_cached(&patches).unwrap();
        assert!(layer.grad_wrt_kn(0).is_ok());
        layer.backward(&grad_out).unwrap();

        // consumed: both backward and the matrix accessors now fail
        assert!(layer.backward(&grad_out).is_err());
        assert!(layer.grad_wrt_ky(0).is_err());

        // a fresh forward restores them
        layer.forward_cached(&patches).unwrap();
        assert!(layer.backward(&grad_out).is_ok());
    }

    #[test]
    fn flatten_of_fold_matches_direct_output() {
        // the folded spatial output re-enumerates to the raw P x N exactly
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let u = random_tensor(&mut rng, &[5, 4, 2]);
        let f = random_factors(&mut rng, 2, 2, 3, 2);
        let patches = patch_expand(&u, 2).unwrap();
        let (vt, _) = cpac_forward(&patches, &f).unwrap();
        let folded = fold_output(&vt, 5, 4, 2).unwrap();
        assert_eq!(flatten_output(&folded).unwrap(), vt);
    }
}
