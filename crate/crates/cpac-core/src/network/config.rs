//! Network configuration, shape-chain validation, and parameter accounting.

use serde::{Deserialize, Serialize};

use crate::error::{CpacError, Result};
use crate::tensor::ShapeDescriptor;

/// One convolution layer of the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    /// Kernel size `d`.
    pub kernel: usize,
    /// Output channels `N_l`.
    pub channels: usize,
    /// Factorization rank `R`; ignored by baseline dense layers.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub momentum: f64,
    /// Optional elementwise rectifier between layers (off by default; the
    /// plain stack is linear up to the loss).
    #[serde(default)]
    pub rectifier: bool,
    /// Allow multi-threaded batch evaluation. Gradient reduction stays in
    /// sample order either way.
    #[serde(default)]
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 32,
            seed: 0,
            momentum: 0.0,
            rectifier: false,
            parallel: false,
        }
    }
}

/// Full description of a network: input geometry, the convolution stack
/// (factorized by default, dense when `baseline` is set), and one fully
/// connected output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_x: usize,
    pub input_y: usize,
    pub input_channels: usize,
    pub classes: usize,
    pub conv: Vec<LayerConfig>,
    /// Use dense convolution kernels instead of factor groups.
    #[serde(default)]
    pub baseline: bool,
    pub train: TrainConfig,
}

impl NetworkConfig {
    /// Checks the shape chain and returns the per-layer geometry. Errors
    /// name the first failing layer (0-based).
    pub fn layer_shapes(&self) -> Result<Vec<ShapeDescriptor>> {
        if self.conv.is_empty() {
            return Err(CpacError::config("at least one convolution layer required"));
        }
        if self.classes < 2 {
            return Err(CpacError::config("classes must be >= 2"));
        }
        let (mut x, mut y, mut s) = (self.input_x, self.input_y, self.input_channels);
        let mut shapes = Vec::with_capacity(self.conv.len());
        for (l, lc) in self.conv.iter().enumerate() {
            if !self.baseline && lc.rank < 1 {
                return Err(CpacError::config(format!("layer {l}: rank must be >= 1")));
            }
            let sd = ShapeDescriptor::new(x, y, s, lc.channels, lc.kernel).map_err(|e| {
                CpacError::config(format!("layer {l}: spatial extents collapse ({e})"))
            })?;
            x = sd.out_x();
            y = sd.out_y();
            s = lc.channels;
            shapes.push(sd);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_shapes().map(|_| ())
    }

    /// Flat input size of the fully connected layer: `P_last * N_last`.
    pub fn fc_input_len(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        let last = shapes.last().unwrap();
        Ok(last.p() * last.n)
    }
}

/// Dense (`M1`) and factorized (`M2`) parameter counts, per layer and total.
/// For a baseline config the factorized count equals the dense count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// `(M1, M2)` per convolution layer.
    pub per_layer: Vec<(usize, usize)>,
    pub m1: usize,
    pub m2: usize,
}

impl ParamCounts {
    pub fn cr(&self) -> f64 {
        self.m2 as f64 / self.m1 as f64
    }

    /// Compression ratio `M2 / M1` rendered to 4 decimals from the exact
    /// rational (round half up).
    pub fn cr_string(&self) -> String {
        compression_ratio_string(self.m2, self.m1)
    }
}

/// Convolution-stack parameter counts: `M1 = d*d*S*N` dense, `M2 = R*(d+d+S+N)`
/// factorized, layer by layer.
pub fn param_counts(config: &NetworkConfig) -> Result<ParamCounts> {
    let shapes = config.layer_shapes()?;
    let mut per_layer = Vec::with_capacity(shapes.len());
    for (sd, lc) in shapes.iter().zip(&config.conv) {
        let m1 = sd.dense_params();
        let m2 = if config.baseline {
            m1
        } else {
            sd.factor_params(lc.rank)
        };
        per_layer.push((m1, m2));
    }
    let m1 = per_layer.iter().map(|&(a, _)| a).sum();
    let m2 = per_layer.iter().map(|&(_, b)| b).sum();
    Ok(ParamCounts { per_layer, m1, m2 })
}

/// Exact-rational rendering of `m2 / m1` to 4 decimal places.
pub fn compression_ratio_string(m2: usize, m1: usize) -> String {
    assert!(m1 > 0, "dense parameter count must be positive");
    let scaled = m2 as u128 * 10_000;
    let q = (2 * scaled + m1 as u128) / (2 * m1 as u128); // round half up
    format!("{}.{:04}", q / 10_000, q % 10_000)
}
