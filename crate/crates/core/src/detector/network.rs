//! The patch classifier: a shallow residual network of depthwise-separable
//! convolutions with one spatial and one channel attention module.
//!
//! Default layout for a base width `w` (w = 32 gives 32/64/128 channels):
//!
//! ```text
//! conv3x3(w) -> conv3x3(w) -> spatial attention
//!   -> res-ds(2w, pool) -> res-ds(2w) -> res-ds(4w, pool) -> res-ds(4w)
//!   -> channel attention -> global average pool
//!   -> dense(256, selu) -> dense(2, softmax)
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attention::{ChannelAttention, SpatialAttention};
use super::dct::dct2d;
use super::layers::{
    Activation, ActivationKind, BatchNorm2d, Conv2d, Dense, GlobalAvgPool, MaxPool2, Module,
    SeparableConv2d,
};
use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Normalized pixel values.
    Pixels,
    /// Orthonormal 2-D DCT-II coefficients of the patch.
    Dct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub base_width: usize,
    pub spatial_kernel: usize,
    pub dense_units: usize,
    pub feature_mode: FeatureMode,
    pub bn_decay: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            base_width: 32,
            spatial_kernel: 7,
            dense_units: 256,
            feature_mode: FeatureMode::Pixels,
            bn_decay: 0.95,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 4 || !self.input_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 4",
                self.input_size
            )));
        }
        if self.base_width == 0 || !self.base_width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "base_width {} must be a positive multiple of 4",
                self.base_width
            )));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::Config("spatial_kernel must be odd".into()));
        }
        if self.dense_units == 0 {
            return Err(Error::Config("dense_units must be positive".into()));
        }
        if !(self.bn_decay > 0.0 && self.bn_decay <= 1.0) {
            return Err(Error::Config(format!(
                "bn_decay {} not in (0, 1]",
                self.bn_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DepthwiseSeparableConv,
    BatchNorm,
    Pool,
    SpatialAttention,
    ChannelAttention,
    ResidualBlock,
    Dense,
    Activation,
}

/// Structural description of one top-level stage. A `residual_block` with
/// stride 2 halves the spatial size through max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub channels_out: usize,
    pub stride: usize,
    pub activation: ActivationKind,
    pub batch_norm: bool,
}

/// Two depthwise-separable convolutions with batch norm, optionally followed
/// by 2x2 max pooling; the shortcut is the identity, or a strided 1x1
/// projection when the block pools.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub cin: usize,
    pub cout: usize,
    pub sep1: SeparableConv2d,
    pub bn1: BatchNorm2d,
    relu1: Activation,
    pub sep2: SeparableConv2d,
    pub bn2: BatchNorm2d,
    pool: Option<MaxPool2>,
    pub projection: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Activation,
}

impl ResidualBlock {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        pool: bool,
        bn_decay: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !pool && cin != cout {
            return Err(Error::Config(format!(
                "{name}: same-size residual block needs cin == cout ({cin} != {cout})"
            )));
        }
        Ok(Self {
            cin,
            cout,
            sep1: SeparableConv2d::new(&format!("{name}.sep1"), cin, cout, 3, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout, bn_decay),
            relu1: Activation::new(ActivationKind::Relu),
            sep2: SeparableConv2d::new(&format!("{name}.sep2"), cout, cout, 3, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout, bn_decay),
            pool: pool.then(MaxPool2::new),
            projection: pool.then(|| {
                (
                    Conv2d::new(&format!("{name}.proj"), cin, cout, 1, 2, false, rng),
                    BatchNorm2d::new(&format!("{name}.proj_bn"), cout, bn_decay),
                )
            }),
            relu_out: Activation::new(ActivationKind::Relu),
        })
    }

    pub fn pools(&self) -> bool {
        self.pool.is_some()
    }
}

impl Module for ResidualBlock {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut main = self.sep1.forward(x, train)?;
        main = self.bn1.forward(&main, train)?;
        main = self.relu1.forward(&main, train)?;
        main = self.sep2.forward(&main, train)?;
        main = self.bn2.forward(&main, train)?;
        if let Some(p) = &mut self.pool {
            main = p.forward(&main, train)?;
        }
        let shortcut = match &mut self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(x, train)?;
                bn.forward(&s, train)?
            }
            None => x.clone(),
        };
        if !main.same_shape(&shortcut) {
            return Err(Error::Shape(format!(
                "residual branches disagree: {:?} vs {:?}",
                main.shape(),
                shortcut.shape()
            )));
        }
        main.data
            .iter_mut()
            .zip(&shortcut.data)
            .for_each(|(m, s)| *m += s);
        self.relu_out.forward(&main, train)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.relu_out.backward(g);
        let mut dm = g.clone();
        if let Some(p) = &mut self.pool {
            dm = p.backward(&dm);
        }
        dm = self.bn2.backward(&dm);
        dm = self.sep2.backward(&dm);
        dm = self.relu1.backward(&dm);
        dm = self.bn1.backward(&dm);
        let mut dx = self.sep1.backward(&dm);
        let ds = match &mut self.projection {
            Some((conv, bn)) => {
                let d = bn.backward(&g);
                conv.backward(&d)
            }
            None => g,
        };
        dx.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += b);
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.sep1.visit_params(f);
        self.bn1.visit_params(f);
        self.sep2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((conv, bn)) = &mut self.projection {
            conv.visit_params(f);
            bn.visit_params(f);
        }
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Stage {
    ConvBn {
        conv: Conv2d,
        bn: BatchNorm2d,
        act: Activation,
    },
    Spatial(SpatialAttention),
    Residual(ResidualBlock),
    Channel(ChannelAttention),
    GlobalPool(GlobalAvgPool),
    Dense {
        dense: Dense,
        act: Activation,
    },
}

impl Stage {
    fn module(&mut self) -> &mut dyn Module {
        match self {
            Stage::Spatial(m) => m,
            Stage::Residual(m) => m,
            Stage::Channel(m) => m,
            Stage::GlobalPool(m) => m,
            Stage::ConvBn { .. } | Stage::Dense { .. } => unreachable!("composite stage"),
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Stage::ConvBn { conv, bn, act } => {
                let y = conv.forward(x, train)?;
                let y = bn.forward(&y, train)?;
                act.forward(&y, train)
            }
            Stage::Dense { dense, act } => {
                let y = dense.forward(x, train)?;
                act.forward(&y, train)
            }
            other => other.module().forward(x, train),
        }
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        match self {
            Stage::ConvBn { conv, bn, act } => {
                let d = act.backward(g);
                let d = bn.backward(&d);
                conv.backward(&d)
            }
            Stage::Dense { dense, act } => {
                let d = act.backward(g);
                dense.backward(&d)
            }
            other => other.module().backward(g),
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Stage::ConvBn { conv, bn, .. } => {
                conv.visit_params(f);
                bn.visit_params(f);
            }
            Stage::Dense { dense, .. } => dense.visit_params(f),
            other => other.module().visit_params(f),
        }
    }

    fn spec(&self) -> LayerSpec {
        match self {
            Stage::ConvBn { conv, act, .. } => LayerSpec {
                kind: LayerKind::Conv,
                kernel: conv.k,
                channels_out: conv.cout,
                stride: conv.stride,
                activation: act.kind,
                batch_norm: true,
            },
            Stage::Spatial(sa) => LayerSpec {
                kind: LayerKind::SpatialAttention,
                kernel: sa.conv.k,
                channels_out: 0,
                stride: 1,
                activation: ActivationKind::Sigmoid,
                batch_norm: false,
            },
            Stage::Residual(rb) => LayerSpec {
                kind: LayerKind::ResidualBlock,
                kernel: 3,
                channels_out: rb.cout,
                stride: if rb.pools() { 2 } else { 1 },
                activation: ActivationKind::Relu,
                batch_norm: true,
            },
            Stage::Channel(ca) => LayerSpec {
                kind: LayerKind::ChannelAttention,
                kernel: 1,
                channels_out: ca.channels,
                stride: 1,
                activation: ActivationKind::Sigmoid,
                batch_norm: false,
            },
            Stage::GlobalPool(_) => LayerSpec {
                kind: LayerKind::Pool,
                kernel: 0,
                channels_out: 0,
                stride: 1,
                activation: ActivationKind::None,
                batch_norm: false,
            },
            Stage::Dense { dense, act } => LayerSpec {
                kind: LayerKind::Dense,
                kernel: 1,
                channels_out: dense.outputs,
                stride: 1,
                activation: if act.kind == ActivationKind::None {
                    ActivationKind::Softmax
                } else {
                    act.kind
                },
                batch_norm: false,
            },
        }
    }
}

/// One stored tensor of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serializable network: structure plus every weight and running statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub format_version: u32,
    pub seed: u64,
    pub config: DetectorConfig,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorRecord>,
}

impl DetectorParams {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: DetectorParams = serde_json::from_str(&text)
            .map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))?;
        if params.format_version != CHECKPOINT_VERSION {
            return Err(Error::Corruption(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                params.format_version
            )));
        }
        Ok(params)
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    seed: u64,
    stages: Vec<Stage>,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.base_width;
        let d = config.bn_decay;
        let conv_bn = |name: &str, cin, cout, rng: &mut ChaCha8Rng| Stage::ConvBn {
            conv: Conv2d::new(name, cin, cout, 3, 1, false, rng),
            bn: BatchNorm2d::new(&format!("{name}_bn"), cout, d),
            act: Activation::new(ActivationKind::Relu),
        };
        let stages = vec![
            conv_bn("stem1", 1, w, &mut rng),
            conv_bn("stem2", w, w, &mut rng),
            Stage::Spatial(SpatialAttention::new(
                "spatial_attention",
                config.spatial_kernel,
                &mut rng,
            )),
            Stage::Residual(ResidualBlock::new("block1", w, 2 * w, true, d, &mut rng)?),
            Stage::Residual(ResidualBlock::new(
                "block2",
                2 * w,
                2 * w,
                false,
                d,
                &mut rng,
            )?),
            Stage::Residual(ResidualBlock::new(
                "block3",
                2 * w,
                4 * w,
                true,
                d,
                &mut rng,
            )?),
            Stage::Residual(ResidualBlock::new(
                "block4",
                4 * w,
                4 * w,
                false,
                d,
                &mut rng,
            )?),
            Stage::Channel(ChannelAttention::new("channel_attention", 4 * w, &mut rng)?),
            Stage::GlobalPool(GlobalAvgPool::default()),
            Stage::Dense {
                dense: Dense::new("fc1", 4 * w, config.dense_units, 1.0, &mut rng),
                act: Activation::new(ActivationKind::Selu),
            },
            Stage::Dense {
                dense: Dense::new("logits", config.dense_units, 2, 1.0, &mut rng),
                act: Activation::new(ActivationKind::None),
            },
        ];
        Ok(Self {
            config,
            seed,
            stages,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut channels = 1;
        self.stages
            .iter()
            .map(|s| {
                let mut spec = s.spec();
                // attention and pooling keep the incoming channel count
                if spec.channels_out == 0 {
                    spec.channels_out = channels;
                }
                channels = spec.channels_out;
                spec
            })
            .collect()
    }

    /// Residual blocks in order, for structural inspection.
    pub fn residual_blocks_mut(&mut self) -> impl Iterator<Item = &mut ResidualBlock> {
        self.stages.iter_mut().filter_map(|s| match s {
            Stage::Residual(rb) => Some(rb),
            _ => None,
        })
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for s in &mut self.stages {
            s.visit_params(f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn trainable_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    /// Logits `N x 2` for a batch of single-channel inputs.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let s = self.config.input_size;
        if x.c != 1 || x.h != s || x.w != s {
            return Err(Error::Shape(format!(
                "detector expects N x 1 x {s} x {s}, got {:?}",
                x.shape()
            )));
        }
        let mut y = x.clone();
        for stage in &mut self.stages {
            y = stage.forward(&y, train)?;
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Tensor {
        let mut g = grad_logits.clone();
        for stage in self.stages.iter_mut().rev() {
            g = stage.backward(&g);
        }
        g
    }

    /// Converts raw patches (`N` patches of `input_size^2` normalized values)
    /// into the network input for the configured feature mode.
    pub fn prepare_input(&self, patches: &[f64]) -> Result<Tensor> {
        let s = self.config.input_size;
        let len = s * s;
        if !patches.len().is_multiple_of(len) {
            return Err(Error::Shape(format!(
                "{} values is not a whole number of {s}x{s} patches",
                patches.len()
            )));
        }
        let n = patches.len() / len;
        let data = match self.config.feature_mode {
            FeatureMode::Pixels => patches.to_vec(),
            FeatureMode::Dct => patches.chunks(len).flat_map(|p| dct2d(p, s)).collect(),
        };
        Tensor::from_vec(n, 1, s, s, data)
    }

    /// `P(fake)` per patch in inference mode. Batches run in parallel on
    /// independent copies of the network; results do not depend on batching.
    pub fn predict_proba(&self, patches: &[f64]) -> Result<Vec<f64>> {
        const BATCH: usize = 64;
        let len = self.config.input_size * self.config.input_size;
        let params = self.params();
        let chunks: Vec<&[f64]> = patches.chunks(BATCH * len).collect();
        let out: Vec<Vec<f64>> = chunks
            .into_par_iter()
            .map(|chunk| {
                let mut net = Detector::from_params(&params)?;
                let x = net.prepare_input(chunk)?;
                let logits = net.forward(&x, false)?;
                Ok(softmax_fake(&logits))
            })
            .collect::<Result<_>>()?;
        Ok(out.concat())
    }

    pub fn params(&self) -> DetectorParams {
        self.clone().snapshot()
    }

    /// Same as [`Detector::params`] without cloning cached activations.
    pub fn snapshot(&mut self) -> DetectorParams {
        let mut tensors = Vec::new();
        self.visit_params(&mut |p| {
            tensors.push(TensorRecord {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            })
        });
        DetectorParams {
            format_version: CHECKPOINT_VERSION,
            seed: self.seed,
            config: self.config,
            layers: self.layer_specs(),
            tensors,
        }
    }

    pub fn from_params(params: &DetectorParams) -> Result<Self> {
        if params.format_version != CHECKPOINT_VERSION {
            return Err(Error::Corruption(format!(
                "checkpoint version {}",
                params.format_version
            )));
        }
        let mut net = Detector::new(params.config, params.seed)?;
        if net.layer_specs() != params.layers {
            return Err(Error::Corruption(
                "layer list does not match the configured architecture".into(),
            ));
        }
        let mut records = params.tensors.iter();
        let mut err = None;
        net.visit_params(&mut |p| {
            if err.is_some() {
                return;
            }
            match records.next() {
                Some(r)
                    if r.name == p.name && r.shape == p.shape && r.data.len() == p.value.len() =>
                {
                    if r.data.iter().any(|v| !v.is_finite()) {
                        err = Some(Error::Corruption(format!(
                            "non-finite weight in {}",
                            r.name
                        )));
                    } else {
                        p.value.copy_from_slice(&r.data);
                    }
                }
                Some(r) => {
                    err = Some(Error::Corruption(format!(
                        "tensor {} {:?} does not match expected {} {:?}",
                        r.name, r.shape, p.name, p.shape
                    )))
                }
                None => err = Some(Error::Corruption(format!("missing tensor {}", p.name))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if records.next().is_some() {
            return Err(Error::Corruption("checkpoint has extra tensors".into()));
        }
        Ok(net)
    }

    /// Drops cached activations (they can be large after a training batch).
    pub fn compact(&mut self) -> Result<Detector> {
        Detector::from_params(&self.snapshot())
    }
}

/// Softmax probability of the fake class (index 1) from `N x 2` logits.
pub fn softmax_fake(logits: &Tensor) -> Vec<f64> {
    logits
        .data
        .chunks(2)
        .map(|l| {
            let m = l[0].max(l[1]);
            let (e0, e1) = ((l[0] - m).exp(), (l[1] - m).exp());
            e1 / (e0 + e1)
        })
        .collect()
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> (f64, Tensor) {
    let n = labels.len();
    let mut grad = Tensor::zeros(n, 2, 1, 1);
    let mut loss = 0.0;
    for (i, (l, &y)) in logits.data.chunks(2).zip(labels).enumerate() {
        let m = l[0].max(l[1]);
        let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
        loss += lse - l[y as usize];
        for (k, &lk) in l.iter().enumerate() {
            let p = (lk - lse).exp();
            grad.data[i * 2 + k] = (p - if k == y as usize { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Every pooling residual block doubles the channel count; every other
/// residual block keeps it.
pub fn check_channel_doubling(layers: &[LayerSpec]) -> Result<()> {
    let mut channels = None;
    for (i, l) in layers.iter().enumerate() {
        if l.kind == LayerKind::ResidualBlock {
            if let Some(c) = channels {
                let expect = if l.stride == 2 { 2 * c } else { c };
                if l.channels_out != expect {
                    return Err(Error::Config(format!(
                        "layer {i}: residual block with stride {} has {} channels, expected {expect}",
                        l.stride, l.channels_out
                    )));
                }
            }
        }
        if l.channels_out > 0 {
            channels = Some(l.channels_out);
        }
    }
    Ok(())
}

/// Exactly one spatial attention, placed before the first pooling block, and
/// exactly one channel attention, directly after the last of the widest blocks.
pub fn check_attention_placement(layers: &[LayerSpec]) -> Result<()> {
    let find_all = |k: LayerKind| -> Vec<usize> {
        layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == k)
            .map(|(i, _)| i)
            .collect()
    };
    let sa = find_all(LayerKind::SpatialAttention);
    let ca = find_all(LayerKind::ChannelAttention);
    if sa.len() != 1 || ca.len() != 1 {
        return Err(Error::Config(format!(
            "expected one spatial and one channel attention, found {} and {}",
            sa.len(),
            ca.len()
        )));
    }
    let blocks: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| {
            matches!(
                l.kind,
                LayerKind::ResidualBlock | LayerKind::Conv | LayerKind::DepthwiseSeparableConv
            )
        })
        .map(|(i, _)| i)
        .collect();
    let first_pool = layers
        .iter()
        .position(|l| l.kind == LayerKind::ResidualBlock && l.stride == 2)
        .ok_or_else(|| Error::Config("no pooling block".into()))?;
    if !(sa[0] < first_pool
        && layers[sa[0] + 1..first_pool]
            .iter()
            .all(|l| l.kind != LayerKind::ResidualBlock && l.kind != LayerKind::Conv))
    {
        return Err(Error::Config(
            "spatial attention must directly precede the first pooling block".into(),
        ));
    }
    let widest = blocks
        .iter()
        .map(|&i| layers[i].channels_out)
        .max()
        .unwrap_or(0);
    let last_widest = *blocks
        .iter()
        .rfind(|&&i| layers[i].channels_out == widest)
        .ok_or_else(|| Error::Config("no convolution blocks".into()))?;
    if ca[0] != last_widest + 1 {
        return Err(Error::Config(format!(
            "channel attention at layer {} but the widest block ends at layer {last_widest}",
            ca[0]
        )));
    }
    Ok(())
}
