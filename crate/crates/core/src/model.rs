//! Scaled-down EFCN-8 and ESegNet builders and the shared forward pass.
//!
//! Both models share a VGG-style encoder of five stages (widths
//! `base·{1,2,4,8,8}`, `{2,2,3,3,3}` 3x3 convolutions each, every conv
//! followed by batchnorm and ReLU, then 2x2 max pooling).
//!
//! EFCN-8 continues with `fc6` (3x3, `64·base` channels) and `fc7` (1x1),
//! scores the deepest map, pool4 and pool3 with 1x1 convolutions and fuses
//! them additively while upsampling with learned transposed convolutions
//! (x2, x2, x8). Dropout follows encoder stages 4 and 5.
//!
//! ESegNet mirrors the encoder with a decoder that upsamples by scattering
//! to the encoder's pooling indices, followed by conv+batchnorm+ReLU blocks
//! and a final 1x1 classifier. Dropout follows encoder stages 3, 4, 5 and
//! decoder stages 5, 4, 3.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::graph::{BatchStats, Graph, NodeId};
use crate::layers::{update_running_stats, BN_EPSILON, DEFAULT_DROPOUT_RATE};
use crate::rng::Rng;
use crate::tensor::{he_normal_init, Element, IntTensor, Tensor};

const STAGE_WIDTHS: [usize; 5] = [1, 2, 4, 8, 8];
const STAGE_CONVS: [usize; 5] = [2, 2, 3, 3, 3];
/// fc6/fc7 width as a multiple of the base width.
const FC_WIDTH: usize = 64;
/// Spatial size must be divisible by this (five 2x2 pools).
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Efcn8,
    Esegnet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Efcn8 => "efcn8",
            ModelKind::Esegnet => "esegnet",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "efcn8" => Ok(ModelKind::Efcn8),
            "esegnet" => Ok(ModelKind::Esegnet),
            other => Err(invalid!("unknown model kind '{other}' (expected efcn8 or esegnet)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Training input size `(H, W)`.
    pub input_size: (usize, usize),
    pub dropout_rate: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            in_channels: 3,
            num_classes: 2,
            base_width: 16,
            input_size: (64, 64),
            dropout_rate: DEFAULT_DROPOUT_RATE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 3 {
            return Err(invalid!("in_channels must be 3, got {}", self.in_channels));
        }
        if self.num_classes != 2 {
            return Err(invalid!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.base_width == 0 {
            return Err(invalid!("base_width must be positive"));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(invalid!("input size {h}x{w} must be positive multiples of {SIZE_MULTIPLE}"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid!("dropout rate must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        self.base_width * STAGE_WIDTHS[stage - 1]
    }
}

#[derive(Clone, Copy, Debug)]
enum LayerKind {
    /// Convolution followed by batchnorm (no bias) and the activation.
    ConvBn { cin: usize, cout: usize, k: usize },
    /// Plain convolution with bias.
    Conv { cin: usize, cout: usize, k: usize },
    /// Transposed convolution with bias.
    ConvT { cin: usize, cout: usize, k: usize, stride: usize },
}

#[derive(Clone, Debug)]
struct LayerDecl {
    name: String,
    kind: LayerKind,
}

fn encoder_layers(spec: &ModelSpec, out: &mut Vec<LayerDecl>) {
    let mut cin = spec.in_channels;
    for stage in 1..=5 {
        let w = spec.width(stage);
        for j in 1..=STAGE_CONVS[stage - 1] {
            out.push(LayerDecl {
                name: enc_name(stage, j),
                kind: LayerKind::ConvBn { cin, cout: w, k: 3 },
            });
            cin = w;
        }
    }
}

fn enc_name(stage: usize, j: usize) -> String {
    format!("enc{stage}.conv{j}")
}

fn dec_name(stage: usize, j: usize) -> String {
    format!("dec{stage}.conv{j}")
}

/// Decoder convolutions of stage `stage` as `(cin, cout)` pairs.
fn decoder_convs(spec: &ModelSpec, stage: usize) -> Vec<(usize, usize)> {
    let w = spec.width(stage);
    if stage == 1 {
        return vec![(w, w); STAGE_CONVS[0] - 1];
    }
    let n = STAGE_CONVS[stage - 1];
    (0..n)
        .map(|j| if j + 1 == n { (w, spec.width(stage - 1)) } else { (w, w) })
        .collect()
}

fn layer_plan(spec: &ModelSpec) -> Vec<LayerDecl> {
    let mut layers = Vec::new();
    encoder_layers(spec, &mut layers);
    let k = spec.num_classes;
    let decl = |name: &str, kind| LayerDecl {
        name: name.to_string(),
        kind,
    };
    match spec.kind {
        ModelKind::Efcn8 => {
            let fc = FC_WIDTH * spec.base_width;
            layers.push(decl("fc6", LayerKind::ConvBn { cin: spec.width(5), cout: fc, k: 3 }));
            layers.push(decl("fc7", LayerKind::ConvBn { cin: fc, cout: fc, k: 1 }));
            layers.push(decl("score_fr", LayerKind::Conv { cin: fc, cout: k, k: 1 }));
            layers.push(decl("score_pool4", LayerKind::Conv { cin: spec.width(4), cout: k, k: 1 }));
            layers.push(decl("score_pool3", LayerKind::Conv { cin: spec.width(3), cout: k, k: 1 }));
            layers.push(decl("up2_fr", LayerKind::ConvT { cin: k, cout: k, k: 4, stride: 2 }));
            layers.push(decl("up2_pool4", LayerKind::ConvT { cin: k, cout: k, k: 4, stride: 2 }));
            layers.push(decl("up8", LayerKind::ConvT { cin: k, cout: k, k: 16, stride: 8 }));
        }
        ModelKind::Esegnet => {
            for stage in (1..=5).rev() {
                for (j, (cin, cout)) in decoder_convs(spec, stage).into_iter().enumerate() {
                    layers.push(LayerDecl {
                        name: dec_name(stage, j + 1),
                        kind: LayerKind::ConvBn { cin, cout, k: 3 },
                    });
                }
            }
            layers.push(decl("classifier", LayerKind::Conv { cin: spec.base_width, cout: k, k: 1 }));
        }
    }
    layers
}

/// Named model weights (`W`), plus batchnorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Element = f32> {
    params: BTreeMap<String, Tensor<F>>,
    buffers: BTreeMap<String, Tensor<F>>,
}

impl<F: Element> ModelParams<F> {
    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| invalid!("model has no tensor named '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        if let Some(t) = self.params.get_mut(name) {
            return Ok(t);
        }
        self.buffers
            .get_mut(name)
            .ok_or_else(|| invalid!("model has no tensor named '{name}'"))
    }

    /// Trainable tensors in name order.
    pub fn trainable(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.params
    }

    pub fn trainable_mut(&mut self) -> &mut BTreeMap<String, Tensor<F>> {
        &mut self.params
    }

    /// Batchnorm running statistics in name order.
    pub fn buffers(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.buffers
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<G: Element>(&self) -> ModelParams<G> {
        ModelParams {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Rebuilds parameters from named tensors, requiring exactly the name
    /// set and shapes `spec` implies.
    pub fn from_named(spec: &ModelSpec, mut named: BTreeMap<String, Tensor<F>>) -> Result<Self> {
        let template = ModelParams::<F>::zeros(spec)?;
        let mut out = template.clone();
        for (name, t) in template.params.iter().chain(&template.buffers) {
            let v = named
                .remove(name)
                .ok_or_else(|| invalid!("missing tensor '{name}'"))?;
            t.expect_same_shape(&v)?;
            *out.get_mut(name)? = v;
        }
        if let Some(extra) = named.keys().next() {
            return Err(invalid!("unexpected tensor '{extra}' for {} model", spec.kind.name()));
        }
        Ok(out)
    }

    /// All tensors (trainable and buffers) by name.
    pub fn named(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter().chain(&self.buffers)
    }

    fn zeros(spec: &ModelSpec) -> Result<Self> {
        build_with(spec, |shape, _| Ok(Tensor::zeros(shape)))
    }

    pub fn apply_bn_stats(&mut self, stats: &[(String, BatchStats)], momentum: f64) -> Result<()> {
        for (prefix, s) in stats {
            let mut rm = self.buffers.remove(&format!("{prefix}.running_mean"));
            let mut rv = self.buffers.remove(&format!("{prefix}.running_var"));
            match (&mut rm, &mut rv) {
                (Some(m), Some(v)) => update_running_stats(m, v, s, momentum),
                _ => return Err(invalid!("no running statistics for '{prefix}'")),
            }
            self.buffers.insert(format!("{prefix}.running_mean"), rm.unwrap());
            self.buffers.insert(format!("{prefix}.running_var"), rv.unwrap());
        }
        Ok(())
    }
}

fn build_with<F: Element>(
    spec: &ModelSpec,
    mut weight: impl FnMut(&[usize], usize) -> Result<Tensor<F>>,
) -> Result<ModelParams<F>> {
    spec.validate()?;
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for layer in layer_plan(spec) {
        let name = layer.name;
        match layer.kind {
            LayerKind::ConvBn { cin, cout, k } => {
                params.insert(format!("{name}.weight"), weight(&[cout, cin, k, k], cin * k * k)?);
                params.insert(format!("{name}.bn.gamma"), Tensor::full(&[cout], F::one()));
                params.insert(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
                buffers.insert(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]));
                buffers.insert(format!("{name}.bn.running_var"), Tensor::full(&[cout], F::one()));
            }
            LayerKind::Conv { cin, cout, k } => {
                params.insert(format!("{name}.weight"), weight(&[cout, cin, k, k], cin * k * k)?);
                params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
            }
            LayerKind::ConvT { cin, cout, k, stride } => {
                // Each output pixel sees (k / stride)^2 taps per input channel.
                let fan_in = (cin * k * k / (stride * stride)).max(1);
                params.insert(format!("{name}.weight"), weight(&[cin, cout, k, k], fan_in)?);
                params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
            }
        }
    }
    Ok(ModelParams { params, buffers })
}

fn build_he(spec: &ModelSpec, rng: &mut Rng) -> Result<ModelParams> {
    build_with(spec, |shape, fan_in| he_normal_init(shape, fan_in, rng))
}

pub fn build_efcn8(spec: &ModelSpec, rng: &mut Rng) -> Result<ModelParams> {
    if spec.kind != ModelKind::Efcn8 {
        return Err(invalid!("build_efcn8 called with a {} spec", spec.kind.name()));
    }
    build_he(spec, rng)
}

pub fn build_esegnet(spec: &ModelSpec, rng: &mut Rng) -> Result<ModelParams> {
    if spec.kind != ModelKind::Esegnet {
        return Err(invalid!("build_esegnet called with a {} spec", spec.kind.name()));
    }
    build_he(spec, rng)
}

pub fn build(spec: &ModelSpec, rng: &mut Rng) -> Result<ModelParams> {
    match spec.kind {
        ModelKind::Efcn8 => build_efcn8(spec, rng),
        ModelKind::Esegnet => build_esegnet(spec, rng),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics, dropout active.
    Train,
    /// Running statistics, dropout off.
    Eval,
    /// Running statistics, dropout active.
    McSample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Replaces every ReLU (used to test ReLU-specific backward rules).
    Identity,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: ForwardMode,
    pub activation: Activation,
    /// EFCN-8 only: add the pool3/pool4 score maps while upsampling.
    pub fuse_skips: bool,
    /// Register weights as trainable leaves.
    pub param_grads: bool,
}

impl ForwardOptions {
    pub fn new(mode: ForwardMode) -> Self {
        ForwardOptions {
            mode,
            activation: Activation::Relu,
            fuse_skips: true,
            param_grads: false,
        }
    }

    pub fn training() -> Self {
        ForwardOptions {
            param_grads: true,
            ..Self::new(ForwardMode::Train)
        }
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: NodeId,
    /// Graph leaf of every trainable tensor.
    pub params: BTreeMap<String, NodeId>,
    /// Batch statistics per batchnorm layer (train mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
    /// ESegNet: output of every unpooling layer.
    pub unpooled: Vec<NodeId>,
    /// Output of every ReLU.
    pub relus: Vec<NodeId>,
    pub dropout_layers: usize,
}

struct Builder<'a, F: Element> {
    g: &'a mut Graph<F>,
    model: &'a ModelParams<F>,
    opts: ForwardOptions,
    dropout_rate: f64,
    rng: &'a mut Rng,
    out: ForwardOutput,
}

impl<F: Element> Builder<'_, F> {
    fn leaf(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.out.params.get(name) {
            return Ok(id);
        }
        let t = self.model.get(name)?.clone();
        let id = if self.opts.param_grads {
            self.g.param(t)
        } else {
            self.g.input(t)
        };
        self.out.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn activate(&mut self, x: NodeId) -> Result<NodeId> {
        match self.opts.activation {
            Activation::Relu => {
                let y = self.g.relu(x)?;
                self.out.relus.push(y);
                Ok(y)
            }
            Activation::Identity => Ok(x),
        }
    }

    fn conv_bn(&mut self, name: &str, x: NodeId, k: usize) -> Result<NodeId> {
        let w = self.leaf(&format!("{name}.weight"))?;
        let c = self.g.conv2d(x, w, None, 1, k / 2)?;
        let prefix = format!("{name}.bn");
        let gamma = self.leaf(&format!("{prefix}.gamma"))?;
        let beta = self.leaf(&format!("{prefix}.beta"))?;
        let y = match self.opts.mode {
            ForwardMode::Train => {
                let (y, stats) = self.g.batchnorm_train(c, gamma, beta, BN_EPSILON)?;
                self.out.bn_stats.push((prefix, stats));
                y
            }
            ForwardMode::Eval | ForwardMode::McSample => {
                let rm = self.model.get(&format!("{prefix}.running_mean"))?;
                let rv = self.model.get(&format!("{prefix}.running_var"))?;
                self.g.batchnorm_eval(c, gamma, beta, rm, rv, BN_EPSILON)?
            }
        };
        self.activate(y)
    }

    fn conv(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let w = self.leaf(&format!("{name}.weight"))?;
        let b = self.leaf(&format!("{name}.bias"))?;
        self.g.conv2d(x, w, Some(b), 1, 0)
    }

    fn upsample(&mut self, name: &str, x: NodeId, stride: usize) -> Result<NodeId> {
        let w = self.leaf(&format!("{name}.weight"))?;
        let b = self.leaf(&format!("{name}.bias"))?;
        self.g.conv_transpose2d(x, w, Some(b), stride, stride / 2)
    }

    fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        self.out.dropout_layers += 1;
        match self.opts.mode {
            ForwardMode::Eval => Ok(x),
            _ if self.dropout_rate == 0.0 => Ok(x),
            ForwardMode::Train | ForwardMode::McSample => self.g.dropout(x, self.dropout_rate, self.rng),
        }
    }

    fn encoder_stage(&mut self, stage: usize, mut h: NodeId) -> Result<NodeId> {
        for j in 1..=STAGE_CONVS[stage - 1] {
            h = self.conv_bn(&enc_name(stage, j), h, 3)?;
        }
        self.g.maxpool2x2(h)
    }

    fn efcn8(&mut self, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let mut pool3 = x;
        let mut pool4 = x;
        for stage in 1..=5 {
            h = self.encoder_stage(stage, h)?;
            if stage >= 4 {
                h = self.dropout(h)?;
            }
            match stage {
                3 => pool3 = h,
                4 => pool4 = h,
                _ => {}
            }
        }
        h = self.conv_bn("fc6", h, 3)?;
        h = self.conv_bn("fc7", h, 1)?;
        let score = self.conv("score_fr", h)?;
        let mut up = self.upsample("up2_fr", score, 2)?;
        if self.opts.fuse_skips {
            let s4 = self.conv("score_pool4", pool4)?;
            up = self.g.add(up, s4)?;
        }
        up = self.upsample("up2_pool4", up, 2)?;
        if self.opts.fuse_skips {
            let s3 = self.conv("score_pool3", pool3)?;
            up = self.g.add(up, s3)?;
        }
        self.upsample("up8", up, 8)
    }

    fn esegnet(&mut self, x: NodeId, spec: &ModelSpec) -> Result<NodeId> {
        let mut h = x;
        let mut pools = Vec::with_capacity(5);
        for stage in 1..=5 {
            h = self.encoder_stage(stage, h)?;
            pools.push(h);
            if stage >= 3 {
                h = self.dropout(h)?;
            }
        }
        for stage in (1..=5).rev() {
            h = self.g.max_unpool2x2(h, pools[stage - 1])?;
            self.out.unpooled.push(h);
            for j in 1..=decoder_convs(spec, stage).len() {
                h = self.conv_bn(&dec_name(stage, j), h, 3)?;
            }
            if stage >= 3 {
                h = self.dropout(h)?;
            }
        }
        self.conv("classifier", h)
    }
}

/// Validates a batch `[N, 3, H, W]` for the forward pass.
pub fn check_input<F: Element>(spec: &ModelSpec, x: &Tensor<F>) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != spec.in_channels {
        return Err(shape_err!("expected {} input channels, got {c}", spec.in_channels));
    }
    if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(shape_err!("input {h}x{w} is not divisible by {SIZE_MULTIPLE}"));
    }
    if x.data().iter().any(|&v| !(v >= F::zero() && v <= F::one())) {
        return Err(invalid!("input values must lie in [0, 1]"));
    }
    Ok(())
}

/// Builds the forward pass of `model` on the graph input `x`; returns the
/// logits node `[N, 2, H, W]` and bookkeeping.
pub fn forward<F: Element>(
    g: &mut Graph<F>,
    model: &ModelParams<F>,
    spec: &ModelSpec,
    x: NodeId,
    opts: ForwardOptions,
    rng: &mut Rng,
) -> Result<ForwardOutput> {
    spec.validate()?;
    check_input(spec, g.value(x)?)?;
    let mut b = Builder {
        g,
        model,
        opts,
        dropout_rate: spec.dropout_rate,
        rng,
        out: ForwardOutput {
            logits: x,
            params: BTreeMap::new(),
            bn_stats: Vec::new(),
            unpooled: Vec::new(),
            relus: Vec::new(),
            dropout_layers: 0,
        },
    };
    let logits = match spec.kind {
        ModelKind::Efcn8 => b.efcn8(x)?,
        ModelKind::Esegnet => b.esegnet(x, spec)?,
    };
    b.out.logits = logits;
    Ok(b.out)
}

/// Logits of a batch without keeping the graph.
pub fn forward_logits<F: Element>(
    model: &ModelParams<F>,
    spec: &ModelSpec,
    x: &Tensor<F>,
    mode: ForwardMode,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let out = forward(&mut g, model, spec, xi, ForwardOptions::new(mode), rng)?;
    Ok(g.value(out.logits)?.clone())
}

/// Per-pixel argmax over classes `[N, K, H, W] -> [N, H, W]`; ties go to
/// the lowest class.
pub fn argmax_labels<F: Element>(t: &Tensor<F>) -> Result<IntTensor> {
    let (n, k, h, w) = t.dims4()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for i in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if t.data()[(i * k + c) * plane + p] > t.data()[(i * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    IntTensor::new(&[n, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check_at;

    fn spec(kind: ModelKind, base: usize, size: usize) -> ModelSpec {
        ModelSpec {
            base_width: base,
            input_size: (size, size),
            ..ModelSpec::new(kind)
        }
    }

    fn input(n: usize, size: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[n, 3, size, size], 0.0, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn output_matches_input_resolution() {
        for kind in [ModelKind::Efcn8, ModelKind::Esegnet] {
            let s = spec(kind, 4, 64);
            let p = build(&s, &mut Rng::new(1)).unwrap();
            for size in [32, 64, 96] {
                let logits = forward_logits(&p, &s, &input(2, size, 2), ForwardMode::Eval, &mut Rng::new(0)).unwrap();
                assert_eq!(logits.shape(), [2, 2, size, size]);
            }
        }
    }

    #[test]
    fn builds_are_seed_deterministic() {
        for kind in [ModelKind::Efcn8, ModelKind::Esegnet] {
            let s = spec(kind, 4, 32);
            let a = build(&s, &mut Rng::new(9)).unwrap();
            let b = build(&s, &mut Rng::new(9)).unwrap();
            for ((na, ta), (nb, tb)) in a.named().zip(b.named()) {
                assert_eq!(na, nb);
                assert_eq!(ta.bits(), tb.bits());
            }
            let c = build(&s, &mut Rng::new(10)).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let mut rng = Rng::new(0);
        assert!(build_efcn8(&ModelSpec::new(ModelKind::Esegnet), &mut rng).is_err());
        assert!(build_esegnet(&ModelSpec::new(ModelKind::Efcn8), &mut rng).is_err());
    }

    #[test]
    fn efcn8_has_more_parameters_than_esegnet() {
        for base in [4, 8, 16, 32] {
            let e = build(&spec(ModelKind::Efcn8, base, 64), &mut Rng::new(0)).unwrap();
            let s = build(&spec(ModelKind::Esegnet, base, 64), &mut Rng::new(0)).unwrap();
            assert!(e.num_parameters() > s.num_parameters(), "base {base}");
        }
    }

    #[test]
    fn parameter_count_matches_layer_formula() {
        // Independent count: 3x3 conv+bn blocks contribute 9·cin·cout + 2·cout.
        let b = 16;
        let block = |cin: usize, cout: usize, k: usize| k * k * cin * cout + 2 * cout;
        let enc: usize = [(3, b), (b, b), (b, 2 * b), (2 * b, 2 * b), (2 * b, 4 * b), (4 * b, 4 * b), (4 * b, 4 * b)]
            .iter()
            .chain(&[(4 * b, 8 * b), (8 * b, 8 * b), (8 * b, 8 * b), (8 * b, 8 * b), (8 * b, 8 * b), (8 * b, 8 * b)])
            .map(|&(i, o)| block(i, o, 3))
            .sum();
        let fcn_head = block(8 * b, 64 * b, 3) + block(64 * b, 64 * b, 1)
            + (64 * b * 2 + 2) + (8 * b * 2 + 2) + (4 * b * 2 + 2)
            + 2 * (2 * 2 * 16 + 2) + (2 * 2 * 256 + 2);
        let dec: usize = [
            (8 * b, 8 * b), (8 * b, 8 * b), (8 * b, 8 * b),
            (8 * b, 8 * b), (8 * b, 8 * b), (8 * b, 4 * b),
            (4 * b, 4 * b), (4 * b, 4 * b), (4 * b, 2 * b),
            (2 * b, 2 * b), (2 * b, b),
            (b, b),
        ]
        .iter()
        .map(|&(i, o)| block(i, o, 3))
        .sum::<usize>()
            + (b * 2 + 2);
        let e = build(&spec(ModelKind::Efcn8, b, 64), &mut Rng::new(0)).unwrap();
        let s = build(&spec(ModelKind::Esegnet, b, 64), &mut Rng::new(0)).unwrap();
        assert_eq!(e.num_parameters(), enc + fcn_head);
        assert_eq!(s.num_parameters(), enc + dec);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        for kind in [ModelKind::Efcn8, ModelKind::Esegnet] {
            let s = spec(kind, 4, 32);
            let p = build(&s, &mut Rng::new(3)).unwrap();
            let x = input(2, 32, 4);
            let a = forward_logits(&p, &s, &x, ForwardMode::Eval, &mut Rng::new(1)).unwrap();
            let b = forward_logits(&p, &s, &x, ForwardMode::Eval, &mut Rng::new(2)).unwrap();
            assert_eq!(a.bits(), b.bits());
        }
    }

    #[test]
    fn mc_sample_passes_differ() {
        for kind in [ModelKind::Efcn8, ModelKind::Esegnet] {
            let s = spec(kind, 4, 32);
            let p = build(&s, &mut Rng::new(3)).unwrap();
            let x = input(1, 32, 4);
            let mut rng = Rng::new(5);
            let a = forward_logits(&p, &s, &x, ForwardMode::McSample, &mut rng).unwrap();
            let b = forward_logits(&p, &s, &x, ForwardMode::McSample, &mut rng).unwrap();
            assert_ne!(a.bits(), b.bits());
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let s = spec(ModelKind::Efcn8, 4, 32);
        let p = build(&s, &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(0);
        let odd = Tensor::zeros(&[1, 3, 48, 32]);
        assert!(matches!(
            forward_logits(&p, &s, &odd, ForwardMode::Eval, &mut rng),
            Err(crate::Error::Shape(_))
        ));
        let hot = Tensor::full(&[1, 3, 32, 32], 1.5);
        assert!(matches!(
            forward_logits(&p, &s, &hot, ForwardMode::Eval, &mut rng),
            Err(crate::Error::InvalidArgument(_))
        ));
        let mut bad = s.clone();
        bad.input_size = (40, 40);
        assert!(build(&bad, &mut rng).is_err());
    }

    #[test]
    fn zeroed_skip_scores_leave_only_the_deep_path() {
        let s = spec(ModelKind::Efcn8, 4, 32);
        let mut p = build(&s, &mut Rng::new(7)).unwrap();
        for name in ["score_pool3", "score_pool4"] {
            for part in ["weight", "bias"] {
                let t = p.get_mut(&format!("{name}.{part}")).unwrap();
                *t = Tensor::zeros(t.shape());
            }
        }
        let x = input(2, 32, 8);
        let run = |fuse: bool| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let opts = ForwardOptions {
                fuse_skips: fuse,
                ..ForwardOptions::new(ForwardMode::Eval)
            };
            let out = forward(&mut g, &p, &s, xi, opts, &mut Rng::new(0)).unwrap();
            g.value(out.logits).unwrap().clone()
        };
        assert_eq!(run(true).bits(), run(false).bits());
        let q = build(&s, &mut Rng::new(7)).unwrap();
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let fused = forward(&mut g, &q, &s, xi, ForwardOptions::new(ForwardMode::Eval), &mut Rng::new(0)).unwrap();
        assert_ne!(g.value(fused.logits).unwrap().bits(), run(false).bits());
    }

    #[test]
    fn unpooled_maps_are_sparse() {
        let s = spec(ModelKind::Esegnet, 4, 64);
        let p = build(&s, &mut Rng::new(2)).unwrap();
        for mode in [ForwardMode::Train, ForwardMode::Eval, ForwardMode::McSample] {
            let mut g = Graph::new();
            let xi = g.input(input(2, 64, 3));
            let out = forward(&mut g, &p, &s, xi, ForwardOptions::new(mode), &mut Rng::new(1)).unwrap();
            assert_eq!(out.unpooled.len(), 5);
            for &id in &out.unpooled {
                let t = g.value(id).unwrap();
                let (n, c, h, w) = t.dims4().unwrap();
                for plane in t.data().chunks(h * w) {
                    let nonzero = plane.iter().filter(|v| **v != 0.0).count();
                    assert!(nonzero * 4 <= h * w, "{nonzero} of {} in {n}x{c}", h * w);
                }
            }
        }
    }

    #[test]
    fn train_mode_reports_every_batchnorm() {
        for kind in [ModelKind::Efcn8, ModelKind::Esegnet] {
            let s = spec(kind, 4, 32);
            let mut p = build(&s, &mut Rng::new(2)).unwrap();
            let mut g = Graph::new();
            let xi = g.input(input(2, 32, 3));
            let out = forward(&mut g, &p, &s, xi, ForwardOptions::training(), &mut Rng::new(1)).unwrap();
            assert_eq!(out.bn_stats.len() * 2, p.buffers().len());
            let before = p.clone();
            p.apply_bn_stats(&out.bn_stats, 0.1).unwrap();
            assert_ne!(before.buffers(), p.buffers());
            assert_eq!(out.params.len(), p.trainable().len());
        }
    }

    #[test]
    fn from_named_round_trips_and_validates() {
        let s = spec(ModelKind::Esegnet, 4, 32);
        let p = build(&s, &mut Rng::new(2)).unwrap();
        let named: BTreeMap<_, _> = p.named().map(|(k, v)| (k.clone(), v.clone())).collect();
        assert_eq!(ModelParams::from_named(&s, named.clone()).unwrap(), p);
        let mut missing = named.clone();
        missing.remove("classifier.bias");
        assert!(ModelParams::from_named(&s, missing).is_err());
        let mut extra = named;
        extra.insert("bogus".into(), Tensor::zeros(&[1]));
        assert!(ModelParams::from_named(&s, extra).is_err());
    }

    fn input_gradient_error(kind: ModelKind, mode: ForwardMode) -> f64 {
        let s = spec(kind, 4, 32);
        let p: ModelParams<f64> = build(&s, &mut Rng::new(11)).unwrap().cast();
        let mut rng = Rng::new(12);
        let x = Tensor::<f64>::uniform(&[2, 3, 32, 32], 0.1, 0.9, &mut rng);
        let weights = Tensor::<f64>::uniform(&[2, 2, 32, 32], -1.0, 1.0, &mut rng);
        let indices: Vec<usize> = (0..48).map(|_| rng.below(x.len())).collect();
        finite_difference_check_at(&x, 1e-6, &indices, |g, xi| {
            let opts = ForwardOptions::new(mode);
            let out = forward(g, &p, &s, xi, opts, &mut Rng::new(13))?;
            g.weighted_sum(out.logits, weights.clone())
        })
        .unwrap()
    }

    #[test]
    fn efcn8_input_gradient_matches_finite_differences() {
        for mode in [ForwardMode::Eval, ForwardMode::Train] {
            let err = input_gradient_error(ModelKind::Efcn8, mode);
            assert!(err < 1e-5, "{mode:?}: {err}");
        }
    }

    #[test]
    fn esegnet_input_gradient_matches_finite_differences() {
        for mode in [ForwardMode::Eval, ForwardMode::Train] {
            let err = input_gradient_error(ModelKind::Esegnet, mode);
            assert!(err < 1e-5, "{mode:?}: {err}");
        }
    }

    #[test]
    fn argmax_ties_go_to_background() {
        let t = Tensor::new(&[1, 2, 1, 3], vec![0.0, 1.0, 2.0, 0.0, 2.0, 1.0]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap().data(), [0, 1, 0]);
    }
}
