//! Fully connected output layer: `y = W . vt + b`, contracting both modes of
//! the `P x N` input. Weights are stored flattened as `(P*N) x C`, pairing
//! with the column stacking of the input.

use serde::{Deserialize, Serialize};

use crate::error::{CpacError, Result};
use crate::tensor::{vec_of, Tensor};

#[derive(Debug, Clone)]
pub struct FcGradients {
    /// `(P*N) x C`
    pub grad_weights: Tensor,
    /// Length `C`
    pub grad_bias: Tensor,
    /// `P x N`, cotangent passed to the layer below.
    pub grad_input: Tensor,
}

/// `y(c) = b(c) + sum_k W(k, c) vec(vt)(k)`.
pub fn fc_forward(weights: &Tensor, bias: &Tensor, vt: &Tensor) -> Result<Tensor> {
    let flat = check_shapes(weights, bias, vt)?;
    let classes = bias.len();
    let v = vec_of(vt)?;
    let mut out = vec![0.0; classes];
    for (c, o) in out.iter_mut().enumerate() {
        let col = &weights.data()[c * flat..(c + 1) * flat];
        let mut acc = bias.data()[c];
        for (w, x) in col.iter().zip(v.data()) {
            acc += w * x;
        }
        *o = acc;
    }
    Ok(Tensor::vector(out))
}

/// Gradients for a cached input `vt` and upstream `grad_y`:
/// `dW = vec(vt) grad_y^T`, `db = grad_y`, `dvt = reshape(W grad_y)`.
pub fn fc_backward(
    weights: &Tensor,
    vt: &Tensor,
    grad_y: &Tensor,
) -> Result<FcGradients> {
    let flat = check_shapes(weights, &Tensor::vector(grad_y.data().to_vec()), vt)?;
    let classes = grad_y.len();
    let v = vec_of(vt)?;
    let mut grad_weights = Tensor::zeros(&[flat, classes]);
    for c in 0..classes {
        let g = grad_y.data()[c];
        let dst = &mut grad_weights.data_mut()[c * flat..(c + 1) * flat];
        for (d, x) in dst.iter_mut().zip(v.data()) {
            *d = x * g;
        }
    }
    let mut grad_input = vec![0.0; flat];
    for c in 0..classes {
        let g = grad_y.data()[c];
        let col = &weights.data()[c * flat..(c + 1) * flat];
        for (d, w) in grad_input.iter_mut().zip(col) {
            *d += w * g;
        }
    }
    Ok(FcGradients {
        grad_weights,
        grad_bias: Tensor::vector(grad_y.data().to_vec()),
        grad_input: Tensor::from_parts(vt.shape().to_vec(), grad_input)?,
    })
}

fn check_shapes(weights: &Tensor, bias: &Tensor, vt: &Tensor) -> Result<usize> {
    if weights.order() != 2 || vt.order() != 2 || bias.order() != 1 {
        return Err(CpacError::shape(
            "fc expects (P*N) x C weights, C bias, P x N input",
        ));
    }
    let flat = vt.len();
    if weights.extent(0) != flat || weights.extent(1) != bias.len() {
        return Err(CpacError::shape(format!(
            "fc weights {:?} do not match input {:?} and {} classes",
            weights.shape(),
            vt.shape(),
            bias.len()
        )));
    }
    Ok(flat)
}

/// Output layer with bias and the cache-between-passes contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FcLayerState {
    pub weights: Tensor,
    pub bias: Tensor,
    #[serde(skip)]
    cache: Option<Tensor>,
}

impl FcLayerState {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.order() != 2 || weights.extent(1) != bias.len() {
            return Err(CpacError::shape("fc weights and bias disagree on classes"));
        }
        Ok(FcLayerState {
            weights,
            bias,
            cache: None,
        })
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, vt: &Tensor) -> Result<Tensor> {
        fc_forward(&self.weights, &self.bias, vt)
    }

    pub fn forward_cached(&mut self, vt: &Tensor) -> Result<Tensor> {
        let out = fc_forward(&self.weights, &self.bias, vt)?;
        self.cache = Some(vt.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<FcGradients> {
        let vt = self
            .cache
            .take()
            .ok_or_else(|| CpacError::state("no forward pass recorded"))?;
        fc_backward(&self.weights, &vt, grad_y)
    }
}
