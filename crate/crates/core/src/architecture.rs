//! Single-stage UNet, the dual-path context-fusion UNet, and their cascade.
//!
//! Parameter tensors of a stage live in one flat, ordered list. The order is
//! also the checkpoint order:
//!
//! 1. image encoder: `enc{i}.conv1`, `enc{i}.conv2` for each level, then
//!    `bottleneck.conv1`, `bottleneck.conv2`
//! 2. context encoder (fusion mode `cifs` only): the same blocks prefixed
//!    with `ctx.`
//! 3. decoder, deepest level first: `dec{i}.up`, `dec{i}.conv1`, `dec{i}.conv2`
//! 4. `head`
//!
//! Convolutions contribute `.weight` then `.bias`; the transposed
//! convolutions (`dec{i}.up`) only have `.weight`. Inside a cascade every
//! name is prefixed with `stage{s}.`, counting from 1.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Padding, Shape, Tensor, Var};

/// How a stage consumes the previous stage's probability map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Image only (first stage).
    None,
    /// Dual-path encoder with additive fusion before every pooling.
    Cifs,
    /// Probability map concatenated to the RGB channels at the input.
    #[serde(alias = "concat")]
    ConcatInput,
}

impl FusionMode {
    pub fn label(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Cifs => "CIFS",
            FusionMode::ConcatInput => "C",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Number of 2x2 poolings.
    pub levels: usize,
    /// Feature width at each scale, finest first; `levels + 1` entries.
    pub channel_widths: Vec<usize>,
    pub fusion_mode: FusionMode,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 3,
            levels: 4,
            channel_widths: vec![16, 32, 64, 128, 256],
            fusion_mode: FusionMode::None,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.channel_widths.len() != self.levels + 1 {
            return Err(Error::Config(format!(
                "{} pooling levels need {} channel widths, got {}",
                self.levels,
                self.levels + 1,
                self.channel_widths.len()
            )));
        }
        if self.channel_widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} (HxW): height and width must be positive multiples of {d} \
                 for {} pooling levels",
                self.levels
            )));
        }
        Ok(())
    }

    fn first_conv_inputs(&self) -> usize {
        match self.fusion_mode {
            FusionMode::ConcatInput => self.in_channels + 1,
            _ => self.in_channels,
        }
    }
}

/// Index into a stage's parameter list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct DoubleConv {
    first: ConvLayer,
    second: ConvLayer,
}

#[derive(Clone, Debug)]
struct EncoderPath {
    levels: Vec<DoubleConv>,
    bottleneck: DoubleConv,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLevel {
    up: ParamId,
    convs: DoubleConv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
}

struct Builder<T: Element> {
    params: Vec<NamedTensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<T> {
    fn he_normal(&mut self, name: String, shape: Shape, fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.numel())
            .map(|_| T::from_f64(normal.sample(&mut self.rng)))
            .collect();
        self.push(name, Tensor::from_vec(shape, data).expect("shape"))
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) -> ParamId {
        self.params.push(NamedTensor { name, tensor });
        ParamId(self.params.len() - 1)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvLayer {
        let weight = self.he_normal(format!("{name}.weight"), Shape::new(cout, cin, k, k), k * k * cin);
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(Shape::new(1, cout, 1, 1)));
        ConvLayer { weight, bias }
    }

    fn double_conv(&mut self, name: &str, cin: usize, cout: usize) -> DoubleConv {
        DoubleConv {
            first: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            second: self.conv(&format!("{name}.conv2"), cout, cout, 3),
        }
    }

    fn encoder(&mut self, prefix: &str, cin: usize, widths: &[usize]) -> EncoderPath {
        let (bottom, upper) = widths.split_last().expect("validated widths");
        let mut prev = cin;
        let levels = upper
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let block = self.double_conv(&format!("{prefix}enc{i}"), prev, w);
                prev = w;
                block
            })
            .collect();
        let bottleneck = self.double_conv(&format!("{prefix}bottleneck"), prev, *bottom);
        EncoderPath { levels, bottleneck }
    }
}

/// Parameters of one UNet stage.
#[derive(Clone, Debug)]
pub struct StageModel<T: Element = f32> {
    config: UNetConfig,
    params: Vec<NamedTensor<T>>,
    image_path: EncoderPath,
    context_path: Option<EncoderPath>,
    /// Deepest level first.
    decoder: Vec<DecoderLevel>,
    head: ConvLayer,
}

/// Builds one stage with He-normal weights (variance `2 / (kh*kw*cin)`) and
/// zero biases, drawn from a ChaCha8 stream seeded with `seed`.
pub fn build_stage<T: Element>(config: &UNetConfig, seed: u64) -> Result<StageModel<T>> {
    config.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let widths = &config.channel_widths;
    let image_path = b.encoder("", config.first_conv_inputs(), widths);
    let context_path = (config.fusion_mode == FusionMode::Cifs).then(|| b.encoder("ctx.", 1, widths));
    let decoder = (0..config.levels)
        .rev()
        .map(|i| {
            let (deep, skip) = (widths[i + 1], widths[i]);
            let up = b.he_normal(format!("dec{i}.up.weight"), Shape::new(deep, skip, 2, 2), 4 * deep);
            let convs = DecoderLevel {
                up,
                convs: DoubleConv {
                    first: b.conv(&format!("dec{i}.conv1"), 2 * skip, skip, 3),
                    second: b.conv(&format!("dec{i}.conv2"), skip, skip, 3),
                },
            };
            convs
        })
        .collect();
    let head = b.conv("head", widths[0], 1, 1);
    Ok(StageModel {
        config: config.clone(),
        params: b.params,
        image_path,
        context_path,
        decoder,
        head,
    })
}

impl<T: Element> StageModel<T> {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Parameters of the context encoder (empty unless fusion mode is cifs).
    pub fn context_param_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with("ctx."))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn zero_context_path(&mut self) {
        for i in self.context_param_indices() {
            self.params[i].tensor.data_mut().fill(T::zero());
        }
    }

    /// Plain single-path stage sharing this stage's image encoder, decoder
    /// and head parameters.
    pub fn image_path_only(&self) -> Result<StageModel<T>> {
        if self.config.fusion_mode != FusionMode::Cifs {
            return Err(Error::InvalidArgument(
                "image_path_only needs a cifs stage".into(),
            ));
        }
        let config = UNetConfig {
            fusion_mode: FusionMode::None,
            ..self.config.clone()
        };
        let mut plain = build_stage::<T>(&config, 0)?;
        for p in plain.params.iter_mut() {
            let src = self
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {}", p.name)))?;
            p.tensor = src.tensor.clone();
        }
        Ok(plain)
    }

    /// Replaces every parameter tensor, in list order, checking shapes.
    pub fn load_params(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::shape(format!(
                "stage has {} parameters, got {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {}, got {}",
                    p.name,
                    p.tensor.shape(),
                    t.shape()
                )));
            }
            p.tensor = t;
        }
        Ok(())
    }

    /// Records every parameter on `g`; differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.tensor.clone())
                } else {
                    g.input(p.tensor.clone())
                }
            })
            .collect()
    }

    fn conv_relu(&self, g: &mut Graph<T>, p: &[Var], layer: ConvLayer, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[layer.weight.0], Some(p[layer.bias.0]), Padding::Same)?;
        Ok(g.relu(y))
    }

    fn double_conv(&self, g: &mut Graph<T>, p: &[Var], block: DoubleConv, x: Var) -> Result<Var> {
        let y = self.conv_relu(g, p, block.first, x)?;
        self.conv_relu(g, p, block.second, y)
    }

    fn check_inputs(&self, g: &Graph<T>, image: Var, prev: Option<Var>) -> Result<()> {
        let s = g.shape(image);
        if s.c() != self.config.in_channels {
            return Err(Error::shape(format!(
                "stage expects {} image channels, got input {s}",
                self.config.in_channels
            )));
        }
        self.config.check_spatial(s.h(), s.w())?;
        match (self.config.fusion_mode, prev) {
            (FusionMode::None, None) => Ok(()),
            (FusionMode::None, Some(_)) => Err(Error::InvalidArgument(
                "a plain stage takes no probability map".into(),
            )),
            (_, None) => Err(Error::InvalidArgument(
                "a fusion stage needs the previous probability map".into(),
            )),
            (_, Some(p)) => {
                let ps = g.shape(p);
                if ps != Shape::new(s.n(), 1, s.h(), s.w()) {
                    return Err(Error::shape(format!(
                        "probability map {ps} does not match image {s}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Runs the stage and returns the per-pixel foreground probability
    /// `(N, 1, H, W)`. `prev` is the previous stage's map and must be given
    /// exactly when the stage uses a fusion mode.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], image: Var, prev: Option<Var>) -> Result<Var> {
        if p.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bound parameters for a stage with {}",
                p.len(),
                self.params.len()
            )));
        }
        self.check_inputs(g, image, prev)?;
        let mut skips = Vec::with_capacity(self.config.levels);
        let bottom = match (&self.context_path, prev) {
            (Some(ctx), Some(prob)) => {
                let (mut a, mut b) = (image, prob);
                for (img_block, ctx_block) in self.image_path.levels.iter().zip(&ctx.levels) {
                    a = self.double_conv(g, p, *img_block, a)?;
                    b = self.double_conv(g, p, *ctx_block, b)?;
                    let fused = g.add(a, b)?;
                    skips.push(fused);
                    a = g.maxpool2x2(fused)?;
                    // the context stream pools its own pre-fusion features
                    b = g.maxpool2x2(b)?;
                }
                let a = self.double_conv(g, p, self.image_path.bottleneck, a)?;
                let b = self.double_conv(g, p, ctx.bottleneck, b)?;
                g.add(a, b)?
            }
            (_, prev) => {
                let mut x = match prev {
                    Some(prob) => g.concat_channels(image, prob)?,
                    None => image,
                };
                for block in &self.image_path.levels {
                    x = self.double_conv(g, p, *block, x)?;
                    skips.push(x);
                    x = g.maxpool2x2(x)?;
                }
                self.double_conv(g, p, self.image_path.bottleneck, x)?
            }
        };
        let mut x = bottom;
        for (level, skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            let up = g.conv_transpose2x2(x, p[level.up.0])?;
            let joined = g.concat_channels(skip, up)?;
            x = self.double_conv(g, p, level.convs, joined)?;
        }
        let logits = g.conv2d(x, p[self.head.weight.0], Some(p[self.head.bias.0]), Padding::Same)?;
        Ok(g.sigmoid(logits))
    }

    /// Graph-free convenience forward.
    pub fn run(&self, image: &Tensor<T>, prev: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.input(image.clone());
        let prev = prev.map(|t| g.input(t.clone()));
        let y = self.forward(&mut g, &p, x, prev)?;
        Ok(g.value(y).clone())
    }
}

/// Image-only stage.
pub fn stage_forward_plain<T: Element>(model: &StageModel<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    expect_mode(model, FusionMode::None)?;
    model.run(image, None)
}

/// Dual-path stage fusing image and context features before every pooling.
pub fn stage_forward_cifs<T: Element>(
    model: &StageModel<T>,
    image: &Tensor<T>,
    prev_prob: &Tensor<T>,
) -> Result<Tensor<T>> {
    expect_mode(model, FusionMode::Cifs)?;
    model.run(image, Some(prev_prob))
}

/// Single-path stage over the image with the probability map appended as a
/// fourth input channel.
pub fn stage_forward_concat<T: Element>(
    model: &StageModel<T>,
    image: &Tensor<T>,
    prev_prob: &Tensor<T>,
) -> Result<Tensor<T>> {
    expect_mode(model, FusionMode::ConcatInput)?;
    model.run(image, Some(prev_prob))
}

fn expect_mode<T: Element>(model: &StageModel<T>, mode: FusionMode) -> Result<()> {
    if model.config.fusion_mode != mode {
        return Err(Error::InvalidArgument(format!(
            "stage built for fusion mode {:?}, called as {mode:?}",
            model.config.fusion_mode
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub stages: usize,
    pub in_channels: usize,
    pub levels: usize,
    pub channel_widths: Vec<usize>,
    /// Fusion mode of stages 2..S; stage 1 always sees only the image.
    pub fusion_mode: FusionMode,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            stages: 4,
            in_channels: 3,
            levels: 4,
            channel_widths: vec![16, 32, 64, 128, 256],
            fusion_mode: FusionMode::Cifs,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("a cascade needs at least one stage".into()));
        }
        if self.fusion_mode == FusionMode::None {
            return Err(Error::Config(
                "cascade fusion mode must be cifs or concat_input".into(),
            ));
        }
        self.stage_config(0).validate()
    }

    pub fn stage_config(&self, index: usize) -> UNetConfig {
        UNetConfig {
            in_channels: self.in_channels,
            levels: self.levels,
            channel_widths: self.channel_widths.clone(),
            fusion_mode: if index == 0 {
                FusionMode::None
            } else {
                self.fusion_mode
            },
        }
    }
}

/// Ordered stages; stage 1 is plain, later stages fuse the previous map.
#[derive(Clone, Debug)]
pub struct CascadeModel<T: Element = f32> {
    config: CascadeConfig,
    stages: Vec<StageModel<T>>,
}

/// Stage `s` (0-based) is initialised from the seed `seed + s`.
pub fn build_cascade<T: Element>(config: &CascadeConfig, seed: u64) -> Result<CascadeModel<T>> {
    config.validate()?;
    let stages = (0..config.stages)
        .map(|s| build_stage(&config.stage_config(s), seed.wrapping_add(s as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CascadeModel {
        config: config.clone(),
        stages,
    })
}

impl<T: Element> CascadeModel<T> {
    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    pub fn stages(&self) -> &[StageModel<T>] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [StageModel<T>] {
        &mut self.stages
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(StageModel::param_count).sum()
    }

    /// `(stage{s}.{name}, tensor)` in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, stage)| {
                stage
                    .params
                    .iter()
                    .map(move |p| (format!("stage{}.{}", s + 1, p.name), &p.tensor))
            })
            .collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.params.iter_mut().map(|p| &mut p.tensor))
            .collect()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Vec<Var>> {
        self.stages.iter().map(|s| s.bind(g, trainable)).collect()
    }

    /// Returns `[Y^1, ..., Y^S]`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &[Vec<Var>], image: Var) -> Result<Vec<Var>> {
        let mut outputs: Vec<Var> = Vec::with_capacity(self.stages.len());
        for (stage, p) in self.stages.iter().zip(bound) {
            let y = stage.forward(g, p, image, outputs.last().copied())?;
            outputs.push(y);
        }
        Ok(outputs)
    }

    /// Per-stage probability maps for a batch of images, without gradients.
    pub fn predict_maps(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.input(image.clone());
        let ys = self.forward(&mut g, &bound, x)?;
        Ok(ys.into_iter().map(|y| g.value(y).clone()).collect())
    }

    /// Gradients of the last backward on `g`, one tensor per parameter in
    /// checkpoint order.
    pub fn collect_grads(&self, g: &mut Graph<T>, bound: &[Vec<Var>]) -> Vec<Tensor<T>> {
        let mut out = Vec::with_capacity(self.param_tensor_count());
        for (stage, vars) in self.stages.iter().zip(bound) {
            for (p, &v) in stage.params.iter().zip(vars) {
                out.push(g.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())));
            }
        }
        out
    }

    pub fn param_tensor_count(&self) -> usize {
        self.stages.iter().map(|s| s.params.len()).sum()
    }

    pub fn from_stages(config: CascadeConfig, stages: Vec<StageModel<T>>) -> Result<Self> {
        config.validate()?;
        if stages.len() != config.stages {
            return Err(Error::shape(format!(
                "config declares {} stages, got {}",
                config.stages,
                stages.len()
            )));
        }
        for (i, s) in stages.iter().enumerate() {
            if s.config != config.stage_config(i) {
                return Err(Error::Config(format!("stage {} does not match the cascade config", i + 1)));
            }
        }
        Ok(CascadeModel { config, stages })
    }

    pub fn cast<U: Element>(&self) -> CascadeModel<U> {
        CascadeModel {
            config: self.config.clone(),
            stages: self.stages.iter().map(StageModel::cast).collect(),
        }
    }
}

impl<T: Element> StageModel<T> {
    pub fn cast<U: Element>(&self) -> StageModel<U> {
        StageModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            image_path: self.image_path.clone(),
            context_path: self.context_path.clone(),
            decoder: self.decoder.clone(),
            head: self.head,
        }
    }
}
