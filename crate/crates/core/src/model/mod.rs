//! The segmentation network, its intermediate feature tap, and the value net
//! that regresses a per-image calibration error from that feature.

mod params;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use params::{poly_lr, BnState, Leaves, Param, ParamRole, ParamSet, Sgd};

use crate::autodiff::{BnMode, Graph, Scalar, Tensor, UnaryKind, Var};
use crate::datagen::{batch_tensor, LabeledImage};
use crate::error::{Error, Result};
use params::{bn_apply, he_normal};

/// Layer sizing of the segmentation network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegArch {
    pub in_channels: usize,
    /// Output width of each conv/BN/ReLU block.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Number of blocks whose output feeds the value net (1-based).
    pub tap: usize,
    pub classes: usize,
}

impl Default for SegArch {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 32, 32],
            kernel: 3,
            tap: 3,
            classes: 5,
        }
    }
}

impl SegArch {
    pub fn feature_channels(&self) -> usize {
        self.widths[self.tap - 1]
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.tap == 0 || self.tap > self.widths.len() {
            return Err(Error::InvalidArgument(format!(
                "tap {} must index one of {} blocks",
                self.tap,
                self.widths.len()
            )));
        }
        if self.classes == 0 || self.in_channels == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "classes and channels must be positive, kernel odd".into(),
            ));
        }
        Ok(())
    }
}

/// Which statistics each batch-norm layer uses during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Batch statistics everywhere.
    Train,
    /// Running statistics everywhere.
    Eval,
    /// Batch statistics, detached, everywhere; running statistics update.
    Warmup,
    /// Running statistics below the tap, batch statistics above it.
    Adapt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockIdx {
    conv: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
}

/// Outputs of one segmentation forward pass.
#[derive(Debug, Clone)]
pub struct SegOutput {
    /// `N x C x H x W` class scores.
    pub logits: Var,
    /// `N x F x H x W` activations after block `tap`.
    pub feature: Var,
    pub leaves: Leaves,
}

/// Stride-1 conv/BN/ReLU blocks followed by a 1x1 classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<S> {
    pub arch: SegArch,
    pub params: ParamSet<S>,
    blocks: Vec<BlockIdx>,
    head_w: usize,
    head_b: usize,
}

fn build_blocks<S: Scalar, R: Rng>(
    set: &mut ParamSet<S>,
    prefix: &str,
    in_channels: usize,
    widths: &[usize],
    kernel: usize,
    rng: &mut R,
) -> Vec<BlockIdx> {
    let mut c_in = in_channels;
    let mut blocks = Vec::with_capacity(widths.len());
    for (i, &c_out) in widths.iter().enumerate() {
        let name = format!("{prefix}{}", i + 1);
        let fan_in = c_in * kernel * kernel;
        let w = he_normal(&[c_out, c_in, kernel, kernel], fan_in, rng);
        let conv = set.add(format!("{name}.conv.weight"), ParamRole::ConvWeight, w);
        let (gamma, beta, bn) = set.add_bn(format!("{name}.bn"), c_out);
        blocks.push(BlockIdx { conv, gamma, beta, bn });
        c_in = c_out;
    }
    blocks
}

fn run_block<S: Scalar>(
    g: &mut Graph<S>,
    set: &mut ParamSet<S>,
    leaves: &Leaves,
    block: BlockIdx,
    x: Var,
    mode: BnMode,
) -> Result<Var> {
    let h = g.conv2d(x, leaves.get(block.conv), None)?;
    let h = bn_apply(
        g,
        h,
        leaves.get(block.gamma),
        leaves.get(block.beta),
        &mut set.bn[block.bn],
        mode,
    )?;
    Ok(g.relu(h))
}

impl<S: Scalar> SegModel<S> {
    pub fn new<R: Rng>(arch: SegArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::default();
        let blocks = build_blocks(&mut params, "block", arch.in_channels, &arch.widths, arch.kernel, rng);
        let last = *arch.widths.last().expect("validated non-empty");
        let hw = he_normal(&[arch.classes, last, 1, 1], last, rng);
        let head_w = params.add("head.weight".into(), ParamRole::ConvWeight, hw);
        let head_b = params.add("head.bias".into(), ParamRole::ConvBias, Tensor::zeros(&[arch.classes]));
        Ok(Self {
            arch,
            params,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Indices into `params.params` of the blocks at or below the tap.
    pub fn feature_extractor_params(&self) -> Vec<usize> {
        self.blocks[..self.arch.tap]
            .iter()
            .flat_map(|b| [b.conv, b.gamma, b.beta])
            .collect()
    }

    pub fn zero_head(&mut self) {
        for idx in [self.head_w, self.head_b] {
            self.params.params[idx].value.data_mut().fill(S::zero());
        }
    }

    fn block_mode(&self, pass: Pass, block: usize) -> BnMode {
        match pass {
            Pass::Train => BnMode::Train,
            Pass::Eval => BnMode::Eval,
            Pass::Warmup => BnMode::StatOnly,
            Pass::Adapt if block < self.arch.tap => BnMode::Eval,
            Pass::Adapt => BnMode::Train,
        }
    }

    /// One forward pass over an `N x 3 x H x W` batch, returning logits and the
    /// tapped feature. Batch-norm running statistics update in passes that use
    /// batch statistics.
    pub fn forward(&mut self, g: &mut Graph<S>, x: Var, pass: Pass) -> Result<SegOutput> {
        let xs = g.value(x).shape();
        if xs.len() != 4 || xs[1] != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "segmentation input must be N x {} x H x W, got {:?}",
                self.arch.in_channels, xs
            )));
        }
        let leaves = Leaves(self.params.register(g));
        let mut h = x;
        let mut feature = None;
        for i in 0..self.blocks.len() {
            let mode = self.block_mode(pass, i);
            h = run_block(g, &mut self.params, &leaves, self.blocks[i], h, mode)?;
            if i + 1 == self.arch.tap {
                feature = Some(h);
            }
        }
        let logits = g.conv2d(h, leaves.get(self.head_w), Some(leaves.get(self.head_b)))?;
        Ok(SegOutput {
            logits,
            feature: feature.expect("tap within blocks"),
            leaves,
        })
    }

    /// Evaluation-mode inference without gradients.
    pub fn infer(&self, images: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let mut frozen = self.clone();
        frozen.params.set_trainable(|_, _| false);
        let out = frozen.forward(&mut g, x, Pass::Eval)?;
        Ok((g.value(out.logits).clone(), g.value(out.feature).clone()))
    }
}

/// Per-image evaluation outputs over a list of images.
#[derive(Debug, Clone)]
pub struct ImageOutputs {
    /// One `1 x C x H x W` tensor per image.
    pub logits: Vec<Tensor<f32>>,
    /// One `1 x F x H x W` tensor per image; empty unless requested.
    pub features: Vec<Tensor<f32>>,
}

impl SegModel<f32> {
    /// Evaluation-mode inference over `images`, `chunk` images per pass.
    pub fn infer_images(&self, images: &[LabeledImage], chunk: usize, keep_features: bool) -> Result<ImageOutputs> {
        let mut out = ImageOutputs {
            logits: Vec::with_capacity(images.len()),
            features: Vec::new(),
        };
        for group in images.chunks(chunk.max(1)) {
            let refs: Vec<&LabeledImage> = group.iter().collect();
            let (x, _) = batch_tensor(&refs)?;
            let (logits, feature) = self.infer(&x)?;
            out.logits.extend(split_batch(logits));
            if keep_features {
                out.features.extend(split_batch(feature));
            }
        }
        Ok(out)
    }
}

/// Splits an `N x ...` tensor into `N` tensors of shape `1 x ...`.
pub fn split_batch<S: Scalar>(t: Tensor<S>) -> Vec<Tensor<S>> {
    let n = t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    let per = t.len() / n.max(1);
    t.data()
        .chunks(per.max(1))
        .map(|c| Tensor::new(shape.clone(), c.to_vec()).expect("chunk matches shape"))
        .collect()
}

/// Concatenates `1 x ...` tensors along the batch axis.
pub fn concat_batch<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Empty("nothing to concatenate".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * parts.len());
    for p in parts {
        if p.shape()[1..] != shape[1..] {
            return Err(Error::Shape(format!("cannot stack {:?} onto {:?}", p.shape(), shape)));
        }
        data.extend_from_slice(p.data());
    }
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(shape, data)
}

/// Layer sizing of the value net.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for ValueArch {
    fn default() -> Self {
        Self {
            in_channels: 32,
            widths: vec![16, 16],
            kernel: 3,
        }
    }
}

/// Output of the value net is squeezed into `[SQUEEZE, 1 - SQUEEZE]` so it
/// stays strictly inside (0, 1) even where the sigmoid saturates.
const SQUEEZE: f64 = 1e-6;

/// Conv/BN/ReLU blocks, global average pooling and a sigmoid-activated
/// linear head: one scalar per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet<S> {
    pub arch: ValueArch,
    pub params: ParamSet<S>,
    blocks: Vec<BlockIdx>,
    head_w: usize,
    head_b: usize,
}

#[derive(Debug, Clone)]
pub struct ValueOutput {
    /// Estimated calibration error, shape `[N]`.
    pub ece_hat: Var,
    pub leaves: Leaves,
}

impl<S: Scalar> ValueNet<S> {
    pub fn new<R: Rng>(arch: ValueArch, rng: &mut R) -> Result<Self> {
        if arch.widths.is_empty() || arch.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "value net needs at least one block and an odd kernel".into(),
            ));
        }
        let mut params = ParamSet::default();
        let blocks = build_blocks(&mut params, "value", arch.in_channels, &arch.widths, arch.kernel, rng);
        let last = *arch.widths.last().expect("non-empty");
        let w = he_normal(&[1, last], last, rng);
        let head_w = params.add("value_head.weight".into(), ParamRole::LinearWeight, w);
        let head_b = params.add("value_head.bias".into(), ParamRole::LinearBias, Tensor::zeros(&[1]));
        Ok(Self {
            arch,
            params,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn zero_head(&mut self) {
        self.params.params[self.head_w].value.data_mut().fill(S::zero());
        self.params.params[self.head_b].value.data_mut().fill(S::zero());
    }

    pub fn set_head_bias(&mut self, bias: f64) {
        self.params.params[self.head_b].value.data_mut()[0] = S::of(bias);
    }

    /// `bn_mode` applies to every batch-norm layer of the value net.
    pub fn forward(&mut self, g: &mut Graph<S>, feature: Var, bn_mode: BnMode) -> Result<ValueOutput> {
        let fs = g.value(feature).shape();
        if fs.len() != 4 || fs[1] != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "value net input must be N x {} x H x W, got {:?}",
                self.arch.in_channels, fs
            )));
        }
        let n = fs[0];
        let leaves = Leaves(self.params.register(g));
        let mut h = feature;
        for i in 0..self.blocks.len() {
            h = run_block(g, &mut self.params, &leaves, self.blocks[i], h, bn_mode)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let z = g.linear(pooled, leaves.get(self.head_w), leaves.get(self.head_b))?;
        let s = g.unary(z, UnaryKind::Sigmoid);
        let s = g.unary(s, UnaryKind::Scale(1.0 - 2.0 * SQUEEZE));
        let s = g.unary(s, UnaryKind::AddConst(SQUEEZE));
        let ece_hat = g.reshape(s, vec![n])?;
        Ok(ValueOutput { ece_hat, leaves })
    }

    pub fn infer(&self, features: &Tensor<S>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let mut frozen = self.clone();
        frozen.params.set_trainable(|_, _| false);
        let out = frozen.forward(&mut g, x, BnMode::Eval)?;
        Ok(g.value(out.ece_hat).to_f64_vec())
    }
}

/// Pipeline stage, which determines what may be trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Source,
    ValueNet,
    Warmup,
    Adapt,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Source => "source",
            Stage::ValueNet => "valuenet",
            Stage::Warmup => "warmup",
            Stage::Adapt => "adapt",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Stage::Source),
            "valuenet" => Ok(Stage::ValueNet),
            "warmup" => Ok(Stage::Warmup),
            "adapt" => Ok(Stage::Adapt),
            other => Err(Error::InvalidArgument(format!("unknown stage `{other}`"))),
        }
    }
}

/// Sets trainability flags for a stage.
///
/// * source: every segmentation parameter; the value net is frozen.
/// * valuenet: the segmentation network is frozen; the value net trains.
/// * warmup: only batch-norm affine parameters of both networks.
/// * adapt: segmentation layers above the tap; the feature extractor and the
///   value net are frozen.
pub fn set_stage_masks<S: Scalar>(seg: &mut SegModel<S>, value: Option<&mut ValueNet<S>>, stage: Stage) {
    let extractor = seg.feature_extractor_params();
    match stage {
        Stage::Source => seg.params.set_trainable(|_, _| true),
        Stage::ValueNet => seg.params.set_trainable(|_, _| false),
        Stage::Warmup => seg.params.set_trainable(|_, p| p.role.is_bn_affine()),
        Stage::Adapt => seg.params.set_trainable(|i, _| !extractor.contains(&i)),
    }
    if let Some(v) = value {
        match stage {
            Stage::ValueNet => v.params.set_trainable(|_, _| true),
            Stage::Warmup => v.params.set_trainable(|_, p| p.role.is_bn_affine()),
            Stage::Source | Stage::Adapt => v.params.set_trainable(|_, _| false),
        }
    }
}
