use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers;
use crate::error::{config_err, input_err, Result};
use crate::seeding::{self, Stream};

/// Block layout and head of the classifier.
///
/// Every block is `conv3x3 → batch norm → ReLU → 2×2 average pool`; the
/// head is global average pooling followed by a linear layer. One activation
/// tap per block, taken at the ReLU output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub block_channels: Vec<usize>,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_size: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            block_channels: vec![16, 32, 64],
            num_classes: 4,
            input_channels: 3,
            input_size: 16,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() {
            return Err(config_err("architecture needs at least one block"));
        }
        if self.block_channels.contains(&0) || self.input_channels == 0 {
            return Err(config_err("channel counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(config_err("num_classes must be at least 2"));
        }
        let depth = self.block_channels.len() as u32;
        let factor = 1usize.checked_shl(depth).unwrap_or(0);
        if factor == 0 || self.input_size == 0 || self.input_size % factor != 0 {
            return Err(config_err(format!(
                "input size {} is not divisible by 2^{depth} for {depth} downsampling blocks",
                self.input_size
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_momentum == 0.0 {
            return Err(config_err("bn_momentum must lie in (0, 1)"));
        }
        if self.bn_eps <= 0.0 {
            return Err(config_err("bn_eps must be positive"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.block_channels.len()
    }

    /// Spatial side of the tap of block `l`.
    pub fn tap_size(&self, l: usize) -> usize {
        self.input_size >> l
    }
}

/// `new = momentum · old + (1 − momentum) · batch`.
pub fn running_update(old: f64, batch: f64, momentum: f64) -> f64 {
    momentum * old + (1.0 - momentum) * batch
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Running statistics of every BN layer, in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub momentum: f64,
    pub layers: Vec<BnLayerStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub weight: Array4<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallNet {
    arch: ArchConfig,
    pub(crate) blocks: Vec<ConvBlock>,
    pub(crate) head_weight: Array2<f64>,
    pub(crate) head_bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics (training only).
    Train,
    /// Normalize with running statistics; never mutates them.
    Eval,
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    cols: Array2<f64>,
    /// Convolution output, i.e. what the BN layer normalizes.
    pub bn_input: Array4<f64>,
    xhat: Array4<f64>,
    inv_std: Vec<f64>,
    /// ReLU output.
    pub tap: Array4<f64>,
    /// Batch moments of `bn_input`, recorded in [`BnMode::Train`].
    pub batch_moments: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    mode: BnMode,
    input_dim: (usize, usize, usize, usize),
    pub blocks: Vec<BlockTrace>,
    pub features: Array2<f64>,
    pub logits: Array2<f64>,
}

impl ForwardTrace {
    pub fn taps(&self) -> Vec<Array4<f64>> {
        self.blocks.iter().map(|b| b.tap.clone()).collect()
    }
}

/// Upstream gradients injected into a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Seeds {
    pub logits: Option<Array2<f64>>,
    /// Added at each block's ReLU output.
    pub taps: Vec<Option<Array4<f64>>>,
    /// Added at each block's BN input.
    pub bn_inputs: Vec<Option<Array4<f64>>>,
}

impl Seeds {
    pub fn from_logits(d: Array2<f64>) -> Self {
        Self { logits: Some(d), ..Self::default() }
    }

    fn tap(&self, l: usize) -> Option<&Array4<f64>> {
        self.taps.get(l).and_then(Option::as_ref)
    }

    fn bn_input(&self, l: usize) -> Option<&Array4<f64>> {
        self.bn_inputs.get(l).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Want {
    pub input: bool,
    pub params: bool,
    pub taps: bool,
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub conv: Vec<Array4<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub head_weight: Array2<f64>,
    pub head_bias: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub input: Option<Array4<f64>>,
    /// Total derivative with respect to each tap (empty unless requested).
    pub taps: Vec<Array4<f64>>,
    pub params: Option<ParamGrads>,
}

/// Per-layer ReLU activation maps for a batch, each `[n, h_l, d_l, d_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTaps {
    pub layers: Vec<Array4<f64>>,
}

impl ActivationTaps {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn batch_len(&self) -> usize {
        self.layers.first().map_or(0, |a| a.len_of(Axis(0)))
    }

    /// Map of sample `i` at layer `l`, `[h, d, d]`.
    pub fn sample(&self, l: usize, i: usize) -> ArrayView3<'_, f64> {
        self.layers[l].index_axis(Axis(0), i)
    }

    /// Spatial means `[n, h_l]` of layer `l`.
    pub fn channel_means(&self, l: usize) -> Array2<f64> {
        layers::global_avg(&self.layers[l])
    }
}

impl SmallNet {
    /// Kaiming-normal convolutions, unit BN scale, uniform head.
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeding::rng(seed, Stream::Init, 0);
        let mut blocks = Vec::with_capacity(arch.num_layers());
        let mut cin = arch.input_channels;
        for &cout in &arch.block_channels {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let weight = Array4::from_shape_simple_fn((cout, cin, 3, 3), || normal.sample(&mut rng));
            blocks.push(ConvBlock {
                weight,
                gamma: vec![1.0; cout],
                beta: vec![0.0; cout],
                running_mean: vec![0.0; cout],
                running_var: vec![1.0; cout],
            });
            cin = cout;
        }
        let bound = 1.0 / (cin as f64).sqrt();
        let head_weight =
            Array2::from_shape_simple_fn((arch.num_classes, cin), || rng.random_range(-bound..bound));
        let head_bias = (0..arch.num_classes).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Self { arch: arch.clone(), blocks, head_weight, head_bias })
    }

    pub(crate) fn from_parts(
        arch: ArchConfig,
        blocks: Vec<ConvBlock>,
        head_weight: Array2<f64>,
        head_bias: Vec<f64>,
    ) -> Self {
        Self { arch, blocks, head_weight, head_bias }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    pub fn head_weight(&self) -> &Array2<f64> {
        &self.head_weight
    }

    pub fn layer_channels(&self) -> Vec<usize> {
        self.arch.block_channels.clone()
    }

    pub fn bn_stats(&self) -> BnStats {
        BnStats {
            momentum: self.arch.bn_momentum,
            layers: self
                .blocks
                .iter()
                .map(|b| BnLayerStats {
                    running_mean: b.running_mean.clone(),
                    running_var: b.running_var.clone(),
                })
                .collect(),
        }
    }

    pub fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        let s = self.arch.input_size;
        if c != self.arch.input_channels || h != s || w != s {
            return Err(input_err(format!(
                "input shape [{n}, {c}, {h}, {w}] does not match [n, {}, {s}, {s}]",
                self.arch.input_channels
            )));
        }
        if n == 0 {
            return Err(input_err("empty batch"));
        }
        Ok(())
    }

    pub fn forward_trace(&self, x: &Array4<f64>, mode: BnMode) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let eps = self.arch.bn_eps;
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut cur = x.as_standard_layout().into_owned();
        for block in &self.blocks {
            let (z, cols) = layers::conv_forward(&cur, &block.weight);
            let (mean, var, moments) = match mode {
                BnMode::Train => {
                    let (m, v) = layers::channel_moments(&z);
                    (m.clone(), v.clone(), Some((m, v)))
                }
                BnMode::Eval => (block.running_mean.clone(), block.running_var.clone(), None),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (xhat, y) = layers::bn_apply(&z, &mean, &inv_std, &block.gamma, &block.beta);
            let tap = layers::relu(&y);
            cur = layers::avgpool2(&tap);
            traces.push(BlockTrace { cols, bn_input: z, xhat, inv_std, tap, batch_moments: moments });
        }
        let features = layers::global_avg(&cur);
        let logits = self.head(&features);
        Ok(ForwardTrace { mode, input_dim: x.dim(), blocks: traces, features, logits })
    }

    fn head(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut logits = features.dot(&self.head_weight.t());
        for mut row in logits.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.head_bias) {
                *v += b;
            }
        }
        logits
    }

    /// Reverse-mode pass over a recorded trace.
    pub fn backward(&self, trace: &ForwardTrace, seeds: &Seeds, want: Want) -> Gradients {
        let nl = self.blocks.len();
        let (n, _, _, _) = trace.input_dim;
        let last = &trace.blocks[nl - 1].tap;
        let mut head_grads = None;
        let mut d_tap = match &seeds.logits {
            Some(dl) => {
                if want.params {
                    let dw = dl.t().dot(&trace.features);
                    let db = dl.sum_axis(Axis(0)).to_vec();
                    head_grads = Some((dw, db));
                }
                let dfeat = dl.dot(&self.head_weight);
                let (_, _, h, w) = last.dim();
                layers::global_avg_backward(&dfeat, h, w)
            }
            None => Array4::zeros(last.raw_dim()),
        };

        // lowest layer that still has an injected seed
        let lowest_tap_seed = (0..nl).find(|&l| seeds.tap(l).is_some());
        let lowest_bn_seed = (0..nl).find(|&l| seeds.bn_input(l).is_some());

        let mut tap_grads = vec![Array4::zeros((0, 0, 0, 0)); if want.taps { nl } else { 0 }];
        let mut conv_g = vec![Array4::zeros((0, 0, 0, 0)); nl];
        let mut gamma_g = vec![Vec::new(); nl];
        let mut beta_g = vec![Vec::new(); nl];
        let mut input_grad = None;

        for l in (0..nl).rev() {
            let bt = &trace.blocks[l];
            if let Some(s) = seeds.tap(l) {
                d_tap += s;
            }
            if want.taps {
                tap_grads[l] = d_tap.clone();
            }
            let need_below = want.input
                || want.params
                || lowest_bn_seed.is_some_and(|b| b <= l)
                || lowest_tap_seed.is_some_and(|t| t < l)
                || (want.taps && l > 0);
            if !need_below {
                break;
            }
            let d_bn_out = layers::relu_backward(&d_tap, &bt.tap);
            let block = &self.blocks[l];
            let mut d_z = match trace.mode {
                BnMode::Train => {
                    let (dz, dg, db) =
                        layers::bn_backward_train(&d_bn_out, &bt.xhat, &bt.inv_std, &block.gamma);
                    gamma_g[l] = dg;
                    beta_g[l] = db;
                    dz
                }
                BnMode::Eval => {
                    let (dz, p) = layers::bn_backward_eval(
                        &d_bn_out,
                        &bt.xhat,
                        &bt.inv_std,
                        &block.gamma,
                        want.params,
                    );
                    if let Some((dg, db)) = p {
                        gamma_g[l] = dg;
                        beta_g[l] = db;
                    }
                    dz
                }
            };
            if let Some(s) = seeds.bn_input(l) {
                d_z += s;
            }
            let (dw, dx) =
                layers::conv_backward(&d_z, &bt.cols, &block.weight, want.params, l > 0 || want.input);
            if let Some(dw) = dw {
                conv_g[l] = dw;
            }
            match (l, dx) {
                (0, dx) => input_grad = dx,
                (_, Some(dx)) => d_tap = layers::avgpool2_backward(&dx),
                (_, None) => unreachable!("input gradient is always requested above layer 0"),
            }
        }

        let params = want.params.then(|| {
            let (head_weight, head_bias) = head_grads.unwrap_or_else(|| {
                (Array2::zeros(self.head_weight.raw_dim()), vec![0.0; self.head_bias.len()])
            });
            ParamGrads { conv: conv_g, gamma: gamma_g, beta: beta_g, head_weight, head_bias }
        });
        let input = if want.input {
            Some(input_grad.unwrap_or_else(|| Array4::zeros(trace.input_dim)))
        } else {
            None
        };
        debug_assert!(input.as_ref().is_none_or(|g| g.len_of(Axis(0)) == n));
        Gradients { input, taps: tap_grads, params }
    }

    /// Inference-mode logits and taps.
    pub fn forward_with_taps(&self, x: &Array4<f64>) -> Result<(Array2<f64>, ActivationTaps)> {
        let trace = self.forward_trace(x, BnMode::Eval)?;
        let taps = ActivationTaps { layers: trace.blocks.into_iter().map(|b| b.tap).collect() };
        Ok((trace.logits, taps))
    }

    pub fn logits(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(x, BnMode::Eval)?.logits)
    }

    /// Replays the network from the tap of block `layer` to the logits.
    pub fn forward_from_tap(&self, layer: usize, tap: &Array4<f64>) -> Result<Array2<f64>> {
        if layer >= self.blocks.len() {
            return Err(input_err(format!("layer {layer} out of range")));
        }
        let (_, c, h, w) = tap.dim();
        let d = self.arch.tap_size(layer);
        if c != self.arch.block_channels[layer] || h != d || w != d {
            return Err(input_err("tap shape does not match the architecture"));
        }
        let eps = self.arch.bn_eps;
        let mut cur = layers::avgpool2(&tap.as_standard_layout().into_owned());
        for block in &self.blocks[layer + 1..] {
            let (z, _) = layers::conv_forward(&cur, &block.weight);
            let inv_std: Vec<f64> = block.running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (_, y) = layers::bn_apply(&z, &block.running_mean, &inv_std, &block.gamma, &block.beta);
            cur = layers::avgpool2(&layers::relu(&y));
        }
        Ok(self.head(&layers::global_avg(&cur)))
    }

    /// Gradients of each sample's class-`class` logit with respect to its
    /// own taps. Returns `(logits, taps, per-layer gradients)`.
    pub fn activation_gradients(
        &self,
        x: &Array4<f64>,
        class: usize,
    ) -> Result<(Array2<f64>, ActivationTaps, Vec<Array4<f64>>)> {
        if class >= self.arch.num_classes {
            return Err(input_err(format!(
                "class {class} out of range for {} classes",
                self.arch.num_classes
            )));
        }
        let trace = self.forward_trace(x, BnMode::Eval)?;
        let mut seed = Array2::zeros(trace.logits.raw_dim());
        seed.column_mut(class).fill(1.0);
        let grads =
            self.backward(&trace, &Seeds::from_logits(seed), Want { taps: true, ..Want::default() });
        let logits = trace.logits.clone();
        let taps = ActivationTaps { layers: trace.blocks.into_iter().map(|b| b.tap).collect() };
        Ok((logits, taps, grads.taps))
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.weight.len() + 2 * b.gamma.len()).sum::<usize>()
            + self.head_weight.len()
            + self.head_bias.len()
    }
}

/// Spatial mean per channel of a single map `[h, d, d]`.
pub fn spatial_means(map: ArrayView3<'_, f64>) -> Array1<f64> {
    let (h, d1, d2) = map.dim();
    let area = (d1 * d2) as f64;
    Array1::from_shape_fn(h, |k| map.index_axis(Axis(0), k).sum() / area)
}

/// Sample `i` of a batch gradient as an owned `[h, d, d]` array.
pub fn sample_of(batch: &Array4<f64>, i: usize) -> Array3<f64> {
    batch.index_axis(Axis(0), i).to_owned()
}
