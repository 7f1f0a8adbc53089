//! Network assembly and training: a stack of convolution layers (factorized
//! or dense baseline) feeding one fully connected classifier, trained with
//! minibatch SGD. Between conv layers the `P x N` output is folded back to
//! spatial form and re-patch-expanded for the next kernel size.

mod config;

pub use config::{
    compression_ratio_string, param_counts, LayerConfig, NetworkConfig, ParamCounts, TrainConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cp::CpFactorSet;
use crate::data::Dataset;
use crate::error::{CpacError, Result};
use crate::layers::{
    cpac_backward, cpac_forward, dense_conv_backward, dense_conv_forward, fc_backward,
    softmax_xent, CpacCache, CpacLayerState, DenseConvLayer, FcLayerState,
};
use crate::tensor::{
    flatten_output, fold_output, patch_expand, patch_expand_adjoint, ShapeDescriptor, Tensor,
};

/// One convolution layer of a built network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ConvKind {
    Cpac(CpacLayerState),
    Dense(DenseConvLayer),
}

/// A built network: the conv stack, the fully connected head, and lazy
/// momentum state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub conv: Vec<ConvKind>,
    pub fc: FcLayerState,
    #[serde(skip)]
    velocity: Option<Velocity>,
}

#[derive(Debug, Clone)]
struct Velocity {
    conv: Vec<ConvParamGrad>,
    fc_weights: Tensor,
    fc_bias: Tensor,
}

/// Per-layer parameter gradients, shaped like the parameters themselves.
#[derive(Debug, Clone)]
pub enum ConvParamGrad {
    Cpac {
        x: Tensor,
        y: Tensor,
        s: Tensor,
        n: Tensor,
    },
    Dense {
        kernel: Tensor,
    },
}

/// Gradients of the mean batch loss for every trainable parameter.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub conv: Vec<ConvParamGrad>,
    pub fc_weights: Tensor,
    pub fc_bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub mean_loss: f64,
    pub correct: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Builds a network with seeded initialization.
///
/// Initialization draws, in order, per conv layer: the dense kernel for a
/// baseline layer, or the X, Y, S, N factor matrices (flat column-major) for
/// a factorized layer; then the FC weights; biases start at zero. Factor
/// entries are uniform in `(-c, c)` with `c = (sqrt(6 / (fan_in + fan_out)) /
/// R)^(1/4)` so the reconstructed kernel comes out at the dense
/// initialization scale independent of `R`.
pub fn build(config: &NetworkConfig) -> Result<Network> {
    let shapes = config.layer_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut conv = Vec::with_capacity(shapes.len());
    for (sd, lc) in shapes.iter().zip(&config.conv) {
        let fan_in = (sd.d * sd.d * sd.s) as f64;
        let fan_out = (sd.d * sd.d * sd.n) as f64;
        let glorot = (6.0 / (fan_in + fan_out)).sqrt();
        if config.baseline {
            let kernel = random_tensor(&mut rng, &[sd.d, sd.d, sd.s, sd.n], glorot);
            conv.push(ConvKind::Dense(DenseConvLayer::new(*sd, kernel)?));
        } else {
            let bound = (glorot / lc.rank as f64).powf(0.25);
            let factors = CpFactorSet::new(
                random_tensor(&mut rng, &[sd.d, lc.rank], bound),
                random_tensor(&mut rng, &[sd.d, lc.rank], bound),
                random_tensor(&mut rng, &[sd.s, lc.rank], bound),
                random_tensor(&mut rng, &[sd.n, lc.rank], bound),
            )?;
            conv.push(ConvKind::Cpac(CpacLayerState::new(*sd, factors)?));
        }
    }
    let flat = config.fc_input_len()?;
    let bound = (6.0 / (flat + config.classes) as f64).sqrt();
    let fc = FcLayerState::new(
        random_tensor(&mut rng, &[flat, config.classes], bound),
        Tensor::zeros(&[config.classes]),
    )?;
    Ok(Network {
        config: config.clone(),
        conv,
        fc,
        velocity: None,
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

enum LayerTape {
    Cpac(CpacCache),
    Dense(Tensor),
}

struct SampleTape {
    tapes: Vec<LayerTape>,
    /// Rectifier masks per layer output (1.0 where the output passed).
    masks: Vec<Option<Vec<f64>>>,
    fc_input: Tensor,
}

impl Network {
    pub fn shapes(&self) -> Vec<ShapeDescriptor> {
        self.config.layer_shapes().expect("validated at build time")
    }

    /// Structural consistency check for networks read back from disk.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.config.layer_shapes()?;
        if self.conv.len() != shapes.len() {
            return Err(CpacError::config(format!(
                "checkpoint has {} conv layers, config describes {}",
                self.conv.len(),
                shapes.len()
            )));
        }
        for (l, (layer, sd)) in self.conv.iter().zip(&shapes).enumerate() {
            let ok = match layer {
                ConvKind::Cpac(c) => {
                    c.factors.validate()?;
                    c.shape == *sd && c.factors.dims() == (sd.d, sd.s, sd.n)
                }
                ConvKind::Dense(d) => {
                    d.shape == *sd && d.kernel.shape() == [sd.d, sd.d, sd.s, sd.n]
                }
            };
            if !ok {
                return Err(CpacError::config(format!(
                    "layer {l} does not match the configured geometry"
                )));
            }
        }
        let flat = self.config.fc_input_len()?;
        if self.fc.weights.shape() != [flat, self.config.classes]
            || self.fc.bias.len() != self.config.classes
        {
            return Err(CpacError::config(
                "fully connected layer does not match the configured geometry",
            ));
        }
        Ok(())
    }

    /// Forward pass without caches; used by evaluation and inspection.
    pub fn forward_logits(&self, image: &Tensor) -> Result<Tensor> {
        let shapes = self.shapes();
        self.check_image(image, &shapes)?;
        let mut patches = patch_expand(image, shapes[0].d)?;
        let mut vt = Tensor::zeros(&[1, 1]);
        for (l, layer) in self.conv.iter().enumerate() {
            vt = match layer {
                ConvKind::Cpac(c) => c.forward(&patches)?,
                ConvKind::Dense(d) => d.forward(&patches)?,
            };
            if self.config.train.rectifier {
                for v in vt.data_mut() {
                    *v = v.max(0.0);
                }
            }
            if l + 1 < self.conv.len() {
                let sd = &shapes[l];
                let spatial = fold_output(&vt, sd.x, sd.y, sd.d)?;
                patches = patch_expand(&spatial, shapes[l + 1].d)?;
            }
        }
        self.fc.forward(&vt)
    }

    /// Forward pass recording everything backward needs.
    fn forward_sample(&self, image: &Tensor, shapes: &[ShapeDescriptor]) -> Result<(Tensor, SampleTape)> {
        let mut patches = patch_expand(image, shapes[0].d)?;
        let mut tapes = Vec::with_capacity(self.conv.len());
        let mut masks = Vec::with_capacity(self.conv.len());
        let mut vt = Tensor::zeros(&[1, 1]);
        for (l, layer) in self.conv.iter().enumerate() {
            vt = match layer {
                ConvKind::Cpac(c) => {
                    let (out, cache) = cpac_forward(&patches, &c.factors)?;
                    tapes.push(LayerTape::Cpac(cache));
                    out
                }
                ConvKind::Dense(d) => {
                    let out = dense_conv_forward(&patches, &d.kernel)?;
                    tapes.push(LayerTape::Dense(patches.clone()));
                    out
                }
            };
            if self.config.train.rectifier {
                let mut mask = vec![0.0; vt.len()];
                for (v, m) in vt.data_mut().iter_mut().zip(&mut mask) {
                    if *v > 0.0 {
                        *m = 1.0;
                    } else {
                        *v = 0.0; // subgradient 0 at 0
                    }
                }
                masks.push(Some(mask));
            } else {
                masks.push(None);
            }
            if l + 1 < self.conv.len() {
                let sd = &shapes[l];
                let spatial = fold_output(&vt, sd.x, sd.y, sd.d)?;
                patches = patch_expand(&spatial, shapes[l + 1].d)?;
            }
        }
        let logits = self.fc.forward(&vt)?;
        Ok((
            logits,
            SampleTape {
                tapes,
                masks,
                fc_input: vt,
            },
        ))
    }

    /// One sample's loss, correctness, and parameter gradients.
    fn backward_sample(
        &self,
        image: &Tensor,
        label: usize,
        shapes: &[ShapeDescriptor],
    ) -> Result<(f64, bool, NetGradients)> {
        let (logits, tape) = self.forward_sample(image, shapes)?;
        let loss = softmax_xent(&logits, label)?;
        let correct = argmax(logits.data()) == label;
        let fc_grads = fc_backward(&self.fc.weights, &tape.fc_input, &loss.gradient)?;
        let mut grad_vt = fc_grads.grad_input;
        let mut conv_grads: Vec<Option<ConvParamGrad>> = (0..self.conv.len()).map(|_| None).collect();
        for l in (0..self.conv.len()).rev() {
            if let Some(mask) = &tape.masks[l] {
                for (g, m) in grad_vt.data_mut().iter_mut().zip(mask) {
                    *g *= m;
                }
            }
            let grad_patches = match (&self.conv[l], &tape.tapes[l]) {
                (ConvKind::Cpac(c), LayerTape::Cpac(cache)) => {
                    let g = cpac_backward(cache, &c.factors, &grad_vt)?;
                    conv_grads[l] = Some(ConvParamGrad::Cpac {
                        x: g.grad_x,
                        y: g.grad_y,
                        s: g.grad_s,
                        n: g.grad_n,
                    });
                    g.grad_input
                }
                (ConvKind::Dense(d), LayerTape::Dense(patches)) => {
                    let (gk, gp) = dense_conv_backward(patches, &d.kernel, &grad_vt)?;
                    conv_grads[l] = Some(ConvParamGrad::Dense { kernel: gk });
                    gp
                }
                _ => return Err(CpacError::state("tape does not match layer kinds")),
            };
            if l > 0 {
                // adjoint of the between-layer reshape: scatter patches back
                // to the spatial grid, then re-enumerate as P x N
                let sd = &shapes[l];
                let spatial = patch_expand_adjoint(&grad_patches, sd.x, sd.y)?;
                grad_vt = flatten_output(&spatial)?;
            }
        }
        Ok((
            loss.value,
            correct,
            NetGradients {
                conv: conv_grads.into_iter().map(Option::unwrap).collect(),
                fc_weights: fc_grads.grad_weights,
                fc_bias: fc_grads.grad_bias,
            },
        ))
    }

    /// One SGD step on a batch: gradients of the mean loss over the batch,
    /// momentum if configured, in-place parameter update.
    pub fn train_step(
        &mut self,
        images: &[&Tensor],
        labels: &[usize],
        batch_index: usize,
    ) -> Result<StepStats> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(CpacError::argument(
                "train_step needs a non-empty batch with matching labels",
            ));
        }
        let shapes = self.shapes();
        let per_sample: Vec<(f64, bool, NetGradients)> = if self.config.train.parallel {
            let results: Vec<Result<_>> = images
                .par_iter()
                .zip(labels.par_iter())
                .map(|(im, &lb)| self.backward_sample(im, lb, &shapes))
                .collect();
            results.into_iter().collect::<Result<Vec<_>>>()?
        } else {
            images
                .iter()
                .zip(labels)
                .map(|(im, &lb)| self.backward_sample(im, lb, &shapes))
                .collect::<Result<Vec<_>>>()?
        };

        let count = per_sample.len();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut total: Option<NetGradients> = None;
        // deterministic reduction: samples accumulate in batch order
        for (loss, ok, grads) in per_sample {
            loss_sum += loss;
            correct += ok as usize;
            total = Some(match total {
                None => grads,
                Some(mut acc) => {
                    acc.accumulate(&grads)?;
                    acc
                }
            });
        }
        let mean_loss = loss_sum / count as f64;
        if !mean_loss.is_finite() {
            return Err(CpacError::Divergence { batch: batch_index });
        }
        let mut total = total.unwrap();
        total.scale(1.0 / count as f64);
        self.apply_update(&total)?;
        Ok(StepStats {
            mean_loss,
            correct,
            count,
        })
    }

    fn apply_update(&mut self, grads: &NetGradients) -> Result<()> {
        let lr = self.config.train.learning_rate;
        let momentum = self.config.train.momentum;
        if momentum != 0.0 {
            if self.velocity.is_none() {
                self.velocity = Some(Velocity {
                    conv: grads.conv.iter().map(ConvParamGrad::zeros_like).collect(),
                    fc_weights: Tensor::zeros(grads.fc_weights.shape()),
                    fc_bias: Tensor::zeros(grads.fc_bias.shape()),
                });
            }
            let vel = self.velocity.as_mut().unwrap();
            vel.fc_weights.scale(momentum);
            vel.fc_weights.add_scaled(&grads.fc_weights, 1.0)?;
            vel.fc_bias.scale(momentum);
            vel.fc_bias.add_scaled(&grads.fc_bias, 1.0)?;
            for (v, g) in vel.conv.iter_mut().zip(&grads.conv) {
                v.scale(momentum);
                v.accumulate(g)?;
            }
            let vel = self.velocity.clone().unwrap();
            self.fc.weights.add_scaled(&vel.fc_weights, -lr)?;
            self.fc.bias.add_scaled(&vel.fc_bias, -lr)?;
            for (layer, g) in self.conv.iter_mut().zip(&vel.conv) {
                apply_conv_update(layer, g, lr)?;
            }
        } else {
            self.fc.weights.add_scaled(&grads.fc_weights, -lr)?;
            self.fc.bias.add_scaled(&grads.fc_bias, -lr)?;
            for (layer, g) in self.conv.iter_mut().zip(&grads.conv) {
                apply_conv_update(layer, g, lr)?;
            }
        }
        Ok(())
    }

    /// Mean loss and accuracy over a dataset; parameters untouched.
    pub fn evaluate(&self, ds: &Dataset) -> Result<EvalStats> {
        if ds.is_empty() {
            return Err(CpacError::argument("cannot evaluate an empty split"));
        }
        let eval_one = |(im, &label): (&Tensor, &usize)| -> Result<(f64, bool)> {
            let logits = self.forward_logits(im)?;
            let loss = softmax_xent(&logits, label)?;
            Ok((loss.value, argmax(logits.data()) == label))
        };
        let rows: Vec<(f64, bool)> = if self.config.train.parallel {
            let results: Vec<Result<_>> = ds
                .images
                .par_iter()
                .zip(ds.labels.par_iter())
                .map(eval_one)
                .collect();
            results.into_iter().collect::<Result<Vec<_>>>()?
        } else {
            ds.images
                .iter()
                .zip(&ds.labels)
                .map(eval_one)
                .collect::<Result<Vec<_>>>()?
        };
        let loss = rows.iter().map(|(l, _)| l).sum::<f64>() / rows.len() as f64;
        let correct = rows.iter().filter(|(_, ok)| *ok).count();
        Ok(EvalStats {
            loss,
            accuracy: correct as f64 / rows.len() as f64,
        })
    }

    fn check_image(&self, image: &Tensor, shapes: &[ShapeDescriptor]) -> Result<()> {
        let sd = &shapes[0];
        if image.shape() != [sd.x, sd.y, sd.s] {
            return Err(CpacError::shape(format!(
                "image {:?} does not match network input {}x{}x{}",
                image.shape(),
                sd.x,
                sd.y,
                sd.s
            )));
        }
        Ok(())
    }
}

fn apply_conv_update(layer: &mut ConvKind, g: &ConvParamGrad, lr: f64) -> Result<()> {
    match (layer, g) {
        (ConvKind::Cpac(c), ConvParamGrad::Cpac { x, y, s, n }) => {
            c.factors.factors_x.add_scaled(x, -lr)?;
            c.factors.factors_y.add_scaled(y, -lr)?;
            c.factors.factors_s.add_scaled(s, -lr)?;
            c.factors.factors_n.add_scaled(n, -lr)?;
        }
        (ConvKind::Dense(d), ConvParamGrad::Dense { kernel }) => {
            d.kernel.add_scaled(kernel, -lr)?;
        }
        _ => return Err(CpacError::state("gradient does not match layer kind")),
    }
    Ok(())
}

impl ConvParamGrad {
    fn zeros_like(&self) -> ConvParamGrad {
        match self {
            ConvParamGrad::Cpac { x, y, s, n } => ConvParamGrad::Cpac {
                x: Tensor::zeros(x.shape()),
                y: Tensor::zeros(y.shape()),
                s: Tensor::zeros(s.shape()),
                n: Tensor::zeros(n.shape()),
            },
            ConvParamGrad::Dense { kernel } => ConvParamGrad::Dense {
                kernel: Tensor::zeros(kernel.shape()),
            },
        }
    }

    fn accumulate(&mut self, other: &ConvParamGrad) -> Result<()> {
        match (self, other) {
            (
                ConvParamGrad::Cpac { x, y, s, n },
                ConvParamGrad::Cpac {
                    x: ox,
                    y: oy,
                    s: os,
                    n: on,
                },
            ) => {
                x.add_scaled(ox, 1.0)?;
                y.add_scaled(oy, 1.0)?;
                s.add_scaled(os, 1.0)?;
                n.add_scaled(on, 1.0)?;
            }
            (ConvParamGrad::Dense { kernel }, ConvParamGrad::Dense { kernel: ok }) => {
                kernel.add_scaled(ok, 1.0)?;
            }
            _ => return Err(CpacError::state("cannot mix gradient kinds")),
        }
        Ok(())
    }

    fn scale(&mut self, c: f64) {
        match self {
            ConvParamGrad::Cpac { x, y, s, n } => {
                x.scale(c);
                y.scale(c);
                s.scale(c);
                n.scale(c);
            }
            ConvParamGrad::Dense { kernel } => kernel.scale(c),
        }
    }
}

impl NetGradients {
    fn accumulate(&mut self, other: &NetGradients) -> Result<()> {
        self.fc_weights.add_scaled(&other.fc_weights, 1.0)?;
        self.fc_bias.add_scaled(&other.fc_bias, 1.0)?;
        for (a, b) in self.conv.iter_mut().zip(&other.conv) {
            a.accumulate(b)?;
        }
        Ok(())
    }

    fn scale(&mut self, c: f64) {
        self.fc_weights.scale(c);
        self.fc_bias.scale(c);
        for g in &mut self.conv {
            g.scale(c);
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Ranks factor groups of one layer by the Euclidean norm of their channel
/// factor, descending, ties broken by ascending group index (0-based).
pub fn significance_ranking(layer: &CpacLayerState) -> Vec<(usize, f64)> {
    let mut items: Vec<(usize, f64)> = (0..layer.factors.rank())
        .map(|r| {
            (
                r,
                CpFactorSet::column(&layer.factors.factors_s, r).frobenius_norm(),
            )
        })
        .collect();
    items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    items
}

/// The overall feature map of one layer plus the per-group rank-one summands
/// (pre-rectifier); the per-group maps sum to the overall map exactly.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    /// `P x N` layer output.
    pub overall: Tensor,
    /// One `P x N` map per factor group.
    pub per_rank: Vec<Tensor>,
}

/// Feature maps of conv layer `layer_index` on one input image.
pub fn feature_maps(net: &Network, image: &Tensor, layer_index: usize) -> Result<FeatureMaps> {
    let shapes = net.shapes();
    if layer_index >= net.conv.len() {
        return Err(CpacError::argument(format!(
            "layer index {layer_index} out of range for {} layers",
            net.conv.len()
        )));
    }
    net.check_image(image, &shapes)?;
    // run the stack up to the requested layer's input
    let mut patches = patch_expand(image, shapes[0].d)?;
    for l in 0..layer_index {
        let mut vt = match &net.conv[l] {
            ConvKind::Cpac(c) => c.forward(&patches)?,
            ConvKind::Dense(d) => d.forward(&patches)?,
        };
        if net.config.train.rectifier {
            for v in vt.data_mut() {
                *v = v.max(0.0);
            }
        }
        let sd = &shapes[l];
        let spatial = fold_output(&vt, sd.x, sd.y, sd.d)?;
        patches = patch_expand(&spatial, shapes[l + 1].d)?;
    }
    let layer = match &net.conv[layer_index] {
        ConvKind::Cpac(c) => c,
        ConvKind::Dense(_) => {
            return Err(CpacError::argument(
                "feature maps require a factorized layer, this one is dense",
            ))
        }
    };
    let (overall, cache) = cpac_forward(&patches, &layer.factors)?;
    let n = layer.factors.factors_n.extent(0);
    let p_total = overall.extent(0);
    let mut per_rank = Vec::with_capacity(layer.factors.rank());
    for (r, rank_cache) in cache.ranks.iter().enumerate() {
        let kn = CpFactorSet::column(&layer.factors.factors_n, r);
        let mut map = Tensor::zeros(&[p_total, n]);
        for ch in 0..n {
            let w = kn.data()[ch];
            let dst = &mut map.data_mut()[ch * p_total..(ch + 1) * p_total];
            for (o, a) in dst.iter_mut().zip(rank_cache.a1.data()) {
                *o = w * a;
            }
        }
        per_rank.push(map);
    }
    Ok(FeatureMaps { overall, per_rank })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One metrics record: loss in nats, accuracy as a fraction, wall time in
/// seconds, and the parameter accounting of the conv stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_time: f64,
    pub m1: usize,
    pub m2: usize,
}

impl MetricsRow {
    pub fn cr_string(&self) -> String {
        compression_ratio_string(self.m2, self.m1)
    }
}
