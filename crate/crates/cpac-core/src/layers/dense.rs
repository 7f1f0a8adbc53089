//! Dense convolution: the literal scalar-loop reference and a patch-based
//! layer used as the uncompressed baseline in comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{CpacError, Result};
use crate::tensor::{unfold, ShapeDescriptor, Tensor};

/// Literal quadruple-loop convolution, stride one, no padding:
///
/// ```text
/// out(x, y, n) = sum_{i, j, s} k(i, j, s, n) * u(x + i, y + j, s)
/// ```
///
/// This is the oracle other forward paths are checked against; clarity over
/// speed.
pub fn conv_forward_reference(u: &Tensor, k: &Tensor) -> Result<Tensor> {
    if u.order() != 3 || k.order() != 4 {
        return Err(CpacError::shape(
            "expected X x Y x S input and d x d x S x N kernel",
        ));
    }
    let (x_in, y_in, s_in) = (u.extent(0), u.extent(1), u.extent(2));
    let (d, d2, ks, n) = (k.extent(0), k.extent(1), k.extent(2), k.extent(3));
    if d != d2 || ks != s_in {
        return Err(CpacError::shape(format!(
            "kernel {:?} incompatible with input {:?}",
            k.shape(),
            u.shape()
        )));
    }
    if d > x_in || d > y_in {
        return Err(CpacError::shape(format!(
            "kernel size {d} exceeds input {x_in}x{y_in}"
        )));
    }
    let (out_x, out_y) = (x_in - d + 1, y_in - d + 1);
    let mut out = Tensor::zeros(&[out_x, out_y, n]);
    for ch in 0..n {
        for x in 0..out_x {
            for y in 0..out_y {
                let mut acc = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        for s in 0..s_in {
                            acc += k.at(&[i, j, s, ch]) * u.at(&[x + i, y + j, s]);
                        }
                    }
                }
                out.set(&[x, y, ch], acc);
            }
        }
    }
    Ok(out)
}

/// Patch-based dense convolution forward: `out = U_(3) * K_mat` where
/// `U_(3)` is the `P x d*d*S` mode-3 unfolding of the patch tensor and
/// `K_mat` the kernel flattened to `d*d*S x N`.
pub fn dense_conv_forward(patches: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    check_kernel(patches, kernel)?;
    let n = kernel.extent(3);
    let k_mat = kernel
        .clone()
        .reshape(vec![kernel.len() / n, n])?;
    unfold(patches, 3)?.matmul(&k_mat)
}

/// Gradients of the dense convolution w.r.t. kernel and input patches.
pub fn dense_conv_backward(
    patches: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_kernel(patches, kernel)?;
    let p_total = patches.extent(3);
    let n = kernel.extent(3);
    if grad_out.order() != 2 || grad_out.extent(0) != p_total || grad_out.extent(1) != n {
        return Err(CpacError::shape(format!(
            "upstream gradient {:?} does not match output {p_total} x {n}",
            grad_out.shape()
        )));
    }
    let flat = kernel.len() / n;
    let u_mat = unfold(patches, 3)?; // P x d*d*S
    let grad_kernel = u_mat
        .transpose()?
        .matmul(grad_out)?
        .reshape(kernel.shape().to_vec())?;
    let k_mat = kernel.clone().reshape(vec![flat, n])?;
    let grad_patches = k_mat
        .matmul(&grad_out.transpose()?)?
        .reshape(patches.shape().to_vec())?;
    Ok((grad_kernel, grad_patches))
}

fn check_kernel(patches: &Tensor, kernel: &Tensor) -> Result<()> {
    if patches.order() != 4 || kernel.order() != 4 {
        return Err(CpacError::shape(
            "expected d x d x S x P patches and d x d x S x N kernel",
        ));
    }
    if patches.shape()[..3] != kernel.shape()[..3] {
        return Err(CpacError::shape(format!(
            "patches {:?} incompatible with kernel {:?}",
            patches.shape(),
            kernel.shape()
        )));
    }
    Ok(())
}

/// Baseline dense convolution layer; same cache contract as the factorized
/// layer so networks can swap between them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseConvLayer {
    pub shape: ShapeDescriptor,
    pub kernel: Tensor,
    #[serde(skip)]
    cache: Option<Tensor>,
}

impl DenseConvLayer {
    pub fn new(shape: ShapeDescriptor, kernel: Tensor) -> Result<Self> {
        shape.validate()?;
        if kernel.shape() != [shape.d, shape.d, shape.s, shape.n] {
            return Err(CpacError::shape(format!(
                "kernel {:?} does not match layer shape",
                kernel.shape()
            )));
        }
        Ok(DenseConvLayer {
            shape,
            kernel,
            cache: None,
        })
    }

    pub fn forward(&self, patches: &Tensor) -> Result<Tensor> {
        dense_conv_forward(patches, &self.kernel)
    }

    pub fn forward_cached(&mut self, patches: &Tensor) -> Result<Tensor> {
        let out = dense_conv_forward(patches, &self.kernel)?;
        self.cache = Some(patches.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let patches = self
            .cache
            .take()
            .ok_or_else(|| CpacError::state("no forward pass recorded"))?;
        dense_conv_backward(&patches, &self.kernel, grad_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::patch_expand;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_ones_3x3_input_2x2_kernel() {
        let u = Tensor::from_fn(&[3, 3, 1], |_| 1.0);
        let k = Tensor::from_fn(&[2, 2, 1, 1], |_| 1.0);
        let v = conv_forward_reference(&u, &k).unwrap();
        assert_eq!(v.shape(), &[2, 2, 1]);
        assert!(v.data().iter().all(|&x| x == 4.0));
    }

    #[test]
    fn single_entry_kernel_shifts_one_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let u = Tensor::from_fn(&[4, 5, 2], |_| rng.gen_range(-1.0..1.0));
        let mut k = Tensor::zeros(&[2, 2, 2, 1]);
        k.set(&[1, 0, 1, 0], 1.0); // picks channel 1 offset (1, 0)
        let v = conv_forward_reference(&u, &k).unwrap();
        for x in 0..3 {
            for y in 0..4 {
                assert_eq!(v.at(&[x, y, 0]), u.at(&[x + 1, y, 1]));
            }
        }
    }

    #[test]
    fn patch_based_forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let u = Tensor::from_fn(&[5, 4, 3], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn(&[3, 3, 3, 2], |_| rng.gen_range(-1.0..1.0));
        let patches = patch_expand(&u, 3).unwrap();
        let fast = dense_conv_forward(&patches, &k).unwrap();
        let reference = conv_forward_reference(&u, &k).unwrap();
        let folded = crate::tensor::fold_output(&fast, 5, 4, 3).unwrap();
        assert!(folded.max_abs_diff(&reference) < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let u = Tensor::from_fn(&[4, 4, 2], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn(&[2, 2, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let patches = patch_expand(&u, 2).unwrap();
        let grad_out = Tensor::from_fn(&[9, 3], |_| rng.gen_range(-1.0..1.0));
        let (grad_k, grad_p) = dense_conv_backward(&patches, &k, &grad_out).unwrap();
        let h = 1e-5;
        for i in 0..k.len() {
            let mut plus = k.clone();
            plus.data_mut()[i] += h;
            let mut minus = k.clone();
            minus.data_mut()[i] -= h;
            let fd = (dense_conv_forward(&patches, &plus).unwrap().dot(&grad_out)
                - dense_conv_forward(&patches, &minus).unwrap().dot(&grad_out))
                / (2.0 * h);
            assert!((grad_k.data()[i] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for i in (0..patches.len()).step_by(7) {
            let mut plus = patches.clone();
            plus.data_mut()[i] += h;
            let mut minus = patches.clone();
            minus.data_mut()[i] -= h;
            let fd = (dense_conv_forward(&plus, &k).unwrap().dot(&grad_out)
                - dense_conv_forward(&minus, &k).unwrap().dot(&grad_out))
                / (2.0 * h);
            assert!((grad_p.data()[i] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn layer_backward_requires_forward() {
        let shape = ShapeDescriptor::new(4, 4, 1, 2, 2).unwrap();
        let mut layer = DenseConvLayer::new(shape, Tensor::zeros(&[2, 2, 1, 2])).unwrap();
        assert!(layer.backward(&Tensor::zeros(&[9, 2])).is_err());
    }
}
