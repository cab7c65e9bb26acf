//! Multi-attribute network: shared dilated feature extractor, one
//! multi-channel mask generator and one binary head per attribute, plus the
//! optional multi-label head and reconstructor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axes, Conv2dParams, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::transform::{transform_mask, TransformParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub image_channels: usize,
    /// Side length of the square input.
    pub image_size: usize,
    /// Feature (and mask) channel count `C`.
    pub feature_channels: usize,
    /// Number of attributes `K`.
    pub num_attributes: usize,
    pub head_hidden: usize,
    pub enable_reconstructor: bool,
    pub enable_multilabel: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetConfig {
    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            image_channels: 1,
            image_size: 32,
            feature_channels: 32,
            num_attributes: 6,
            head_hidden: 16,
            enable_reconstructor: true,
            enable_multilabel: true,
            seed: 0,
        }
    }

    /// Full-width preset: 128 feature/mask channels over the 40 CelebA attributes.
    pub fn paper() -> Self {
        Self {
            image_channels: 3,
            image_size: 64,
            feature_channels: 128,
            num_attributes: 40,
            head_hidden: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_channels == 0 || self.num_attributes == 0 || self.image_channels == 0 {
            return Err(Error::validation(
                "feature_channels, num_attributes and image_channels must be at least 1",
            ));
        }
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(Error::validation(format!(
                "image_size must be even and at least 8, got {}",
                self.image_size
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::validation("head_hidden must be at least 1"));
        }
        if self.enable_reconstructor && self.feature_channels < 2 {
            return Err(Error::validation(
                "the reconstructor needs at least 2 feature channels",
            ));
        }
        Ok(())
    }

    /// Spatial size of the feature map.
    pub fn feature_size(&self) -> usize {
        self.image_size / 2
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvLayer {
    kernel: usize,
    bias: usize,
    params: Conv2dParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DenseLayer {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct MaskGenerator {
    conv1: ConvLayer,
    conv2: ConvLayer,
    project: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
struct BinaryHead {
    conv: ConvLayer,
    dense: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
struct Reconstructor {
    squeeze: ConvLayer,
    out: ConvLayer,
}

/// Which parameter group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    MaskGenerator(usize),
    BinaryHead(usize),
    MultiLabel,
    Reconstructor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiAttrNet {
    config: NetConfig,
    params: Vec<Param>,
    groups: Vec<ParamGroup>,
    stem: ConvLayer,
    blocks: Vec<ConvLayer>,
    mask_generators: Vec<MaskGenerator>,
    binary_heads: Vec<BinaryHead>,
    multilabel: Option<DenseLayer>,
    reconstructor: Option<Reconstructor>,
}

/// Per-attribute masks, each `[B, C, Hf, Wf]` with values in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskSet {
    pub masks: Vec<Tensor>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
    groups: Vec<ParamGroup>,
}

impl Builder {
    fn push(&mut self, name: String, value: Tensor, group: ParamGroup) -> usize {
        let grad = vec![0.0; value.numel()];
        self.params.push(Param { name, value, grad });
        self.groups.push(group);
        self.params.len() - 1
    }

    fn uniform(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        size: usize,
        params: Conv2dParams,
    ) -> ConvLayer {
        let field = size * size;
        let kernel = self.uniform(&[cout, cin, size, size], cin * field, cout * field);
        ConvLayer {
            kernel: self.push(format!("{name}.kernel"), kernel, group),
            bias: self.push(format!("{name}.bias"), Tensor::zeros(&[cout]), group),
            params,
        }
    }

    fn dense(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> DenseLayer {
        let weight = self.uniform(&[fan_in, fan_out], fan_in, fan_out);
        DenseLayer {
            weight: self.push(format!("{name}.weight"), weight, group),
            bias: self.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]), group),
        }
    }
}

/// Dilations of the resolution-preserving extractor blocks.
pub const BLOCK_DILATIONS: [usize; 3] = [1, 2, 4];

/// Inputs enter the stem as `(x - 0.5) * INPUT_SCALE`.
pub const INPUT_SCALE: f64 = 8.0;

impl MultiAttrNet {
    /// Deterministic Glorot-uniform initialisation with zero biases.
    pub fn init_params(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let c = config.feature_channels;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: Vec::new(),
            groups: Vec::new(),
        };
        let same = |d: usize| Conv2dParams::new(1, d, d);
        let stem = b.conv(
            "extractor.stem",
            ParamGroup::Extractor,
            config.image_channels,
            c,
            3,
            Conv2dParams::new(2, 1, 1),
        );
        let blocks = BLOCK_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| b.conv(&format!("extractor.block{i}"), ParamGroup::Extractor, c, c, 3, same(d)))
            .collect();
        let mask_generators = (0..config.num_attributes)
            .map(|k| {
                let g = ParamGroup::MaskGenerator(k);
                MaskGenerator {
                    conv1: b.conv(&format!("maskgen{k}.conv1"), g, c, c, 3, same(1)),
                    conv2: b.conv(&format!("maskgen{k}.conv2"), g, c, c, 3, same(1)),
                    project: b.conv(&format!("maskgen{k}.project"), g, c, c, 1, Conv2dParams::default()),
                }
            })
            .collect();
        let binary_heads = (0..config.num_attributes)
            .map(|k| {
                let g = ParamGroup::BinaryHead(k);
                BinaryHead {
                    conv: b.conv(&format!("binhead{k}.conv"), g, c, config.head_hidden, 3, same(1)),
                    dense: b.dense(&format!("binhead{k}.dense"), g, config.head_hidden, 1),
                }
            })
            .collect();
        let multilabel = config
            .enable_multilabel
            .then(|| b.dense("multilabel.dense", ParamGroup::MultiLabel, c, config.num_attributes));
        let reconstructor = config.enable_reconstructor.then(|| Reconstructor {
            squeeze: b.conv("reconstructor.squeeze", ParamGroup::Reconstructor, c, c / 2, 1, Conv2dParams::default()),
            out: b.conv(
                "reconstructor.out",
                ParamGroup::Reconstructor,
                c / 2,
                config.image_channels,
                3,
                same(1),
            ),
        });
        Ok(Self {
            config,
            params: b.params,
            groups: b.groups,
            stem,
            blocks,
            mask_generators,
            binary_heads,
            multilabel,
            reconstructor,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn num_attributes(&self) -> usize {
        self.config.num_attributes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_group(&self, index: usize) -> ParamGroup {
        self.groups[index]
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds gradients gathered from a [`Forward`] pass.
    pub fn accumulate_grads(&mut self, grads: &[Option<Vec<f64>>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    /// Copies attribute `src`'s mask generator weights onto attribute `dst`.
    pub fn copy_mask_generator(&mut self, src: usize, dst: usize) -> Result<()> {
        self.check_attribute(src)?;
        self.check_attribute(dst)?;
        let (s, d) = (&self.mask_generators[src], &self.mask_generators[dst]);
        let pairs: Vec<(usize, usize)> = [
            (s.conv1, d.conv1),
            (s.conv2, d.conv2),
            (s.project, d.project),
        ]
        .iter()
        .flat_map(|(a, b)| [(a.kernel, b.kernel), (a.bias, b.bias)])
        .collect();
        for (from, to) in pairs {
            self.params[to].value = self.params[from].value.clone();
        }
        Ok(())
    }

    fn check_attribute(&self, k: usize) -> Result<()> {
        if k >= self.config.num_attributes {
            return Err(Error::Index(format!(
                "attribute index {k} out of range for {} attributes",
                self.config.num_attributes
            )));
        }
        Ok(())
    }

    /// Shared features `[B, C, H/2, W/2]`.
    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut fwd = Forward::inference(self);
        let xv = fwd.input(x)?;
        let f = fwd.features(xv)?;
        Ok(fwd.value(f).clone())
    }

    pub fn generate_mask(&self, k: usize, feat: &Tensor) -> Result<Tensor> {
        let mut fwd = Forward::inference(self);
        let fv = fwd.tape.constant(feat.clone());
        let m = fwd.mask(k, fv)?;
        Ok(fwd.value(m).clone())
    }

    pub fn binary_head(&self, k: usize, masked_feat: &Tensor) -> Result<Tensor> {
        let mut fwd = Forward::inference(self);
        let mv = fwd.tape.constant(masked_feat.clone());
        let p = fwd.binary_head(k, mv)?;
        Ok(fwd.value(p).clone())
    }

    /// Probability `[B]` and mask `[B, C, Hf, Wf]` for attribute `k` under `transform`.
    pub fn forward_attribute(&self, k: usize, x: &Tensor, transform: TransformParams) -> Result<(Tensor, Tensor)> {
        let mut fwd = Forward::inference(self);
        let xv = fwd.input(x)?;
        let f = fwd.features(xv)?;
        let (p, m) = fwd.attribute(k, f, Some(transform))?;
        Ok((fwd.value(p).clone(), fwd.value(m).clone()))
    }

    /// Attribute `k` probability `[B]` from precomputed features and raw mask.
    ///
    /// Matches [`MultiAttrNet::forward_attribute`] bitwise for the same inputs.
    pub fn attribute_from_mask(&self, k: usize, feat: &Tensor, mask: &Tensor, transform: TransformParams) -> Result<Tensor> {
        if feat.shape() != mask.shape() {
            return Err(Error::shape(format!(
                "mask {:?} does not match features {:?}",
                mask.shape(),
                feat.shape()
            )));
        }
        let mut fwd = Forward::inference(self);
        let fv = fwd.tape.constant(feat.clone());
        fwd.check_feature(fv)?;
        let multiplier = fwd.tape.constant(transform_mask(mask, transform)?);
        let masked = fwd.tape.mul(multiplier, fv)?;
        let p = fwd.binary_head(k, masked)?;
        Ok(fwd.value(p).clone())
    }

    pub fn multilabel_head(&self, feat: &Tensor) -> Result<Tensor> {
        let mut fwd = Forward::inference(self);
        let fv = fwd.tape.constant(feat.clone());
        let p = fwd.multilabel(fv)?;
        Ok(fwd.value(p).clone())
    }

    pub fn reconstruct(&self, feat: &Tensor) -> Result<Tensor> {
        let mut fwd = Forward::inference(self);
        let fv = fwd.tape.constant(feat.clone());
        let r = fwd.reconstruct(fv)?;
        Ok(fwd.value(r).clone())
    }

    /// Binary-head probabilities `[B, K]` for every attribute.
    pub fn predict(&self, x: &Tensor, transform: TransformParams) -> Result<Tensor> {
        Ok(self.predict_with_masks(x, transform)?.0)
    }

    /// Probabilities `[B, K]` together with the untransformed masks.
    pub fn predict_with_masks(&self, x: &Tensor, transform: TransformParams) -> Result<(Tensor, AttentionMaskSet)> {
        let mut fwd = Forward::inference(self);
        let xv = fwd.input(x)?;
        let f = fwd.features(xv)?;
        let mut probs = Vec::with_capacity(self.num_attributes());
        let mut masks = Vec::with_capacity(self.num_attributes());
        for k in 0..self.num_attributes() {
            let (p, m) = fwd.attribute(k, f, Some(transform))?;
            probs.push(p);
            masks.push(fwd.value(m).clone());
        }
        let stacked = fwd.tape.stack_last(&probs)?;
        Ok((fwd.value(stacked).clone(), AttentionMaskSet { masks }))
    }

    pub fn masks(&self, x: &Tensor) -> Result<AttentionMaskSet> {
        let mut fwd = Forward::inference(self);
        let xv = fwd.input(x)?;
        let f = fwd.features(xv)?;
        let masks = (0..self.num_attributes())
            .map(|k| fwd.mask(k, f).map(|m| fwd.value(m).clone()))
            .collect::<Result<_>>()?;
        Ok(AttentionMaskSet { masks })
    }
}

/// A forward pass recorded on its own tape with every parameter bound as a leaf.
pub struct Forward<'n> {
    net: &'n MultiAttrNet,
    pub tape: Tape,
    vars: Vec<Var>,
}

impl<'n> Forward<'n> {
    /// Parameters are trainable leaves; call [`Forward::backward`] afterwards.
    pub fn training(net: &'n MultiAttrNet) -> Self {
        Self::bind(net, true)
    }

    pub fn inference(net: &'n MultiAttrNet) -> Self {
        Self::bind(net, false)
    }

    fn bind(net: &'n MultiAttrNet, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let vars = net
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        Self { net, tape, vars }
    }

    pub fn net(&self) -> &MultiAttrNet {
        self.net
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Tape variable holding parameter `index`.
    pub fn param_var(&self, index: usize) -> Var {
        self.vars[index]
    }

    /// Records an input image batch `[B, Cimg, H, W]`.
    pub fn input(&mut self, x: &Tensor) -> Result<Var> {
        let cfg = &self.net.config;
        let expected = [cfg.image_channels, cfg.image_size, cfg.image_size];
        if x.ndim() != 4 || x.shape()[1..] != expected {
            return Err(Error::shape(format!(
                "expected input [B, {}, {}, {}], got {:?}",
                expected[0],
                expected[1],
                expected[2],
                x.shape()
            )));
        }
        Ok(self.tape.constant(x.clone()))
    }

    fn conv(&mut self, layer: ConvLayer, x: Var) -> Result<Var> {
        let (k, b) = (self.vars[layer.kernel], self.vars[layer.bias]);
        self.tape.conv2d(x, k, Some(b), layer.params)
    }

    fn dense(&mut self, layer: DenseLayer, x: Var) -> Result<Var> {
        let y = self.tape.matmul(x, self.vars[layer.weight])?;
        self.tape.add(y, self.vars[layer.bias])
    }

    fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.tape.mean(x, Axes::List(vec![2, 3]))
    }

    fn check_feature(&self, v: Var) -> Result<()> {
        let cfg = &self.net.config;
        let shape = self.tape.shape(v);
        let fs = cfg.feature_size();
        if shape.len() != 4 || shape[1..] != [cfg.feature_channels, fs, fs] {
            return Err(Error::shape(format!(
                "expected features [B, {}, {fs}, {fs}], got {shape:?}",
                cfg.feature_channels
            )));
        }
        Ok(())
    }

    pub fn features(&mut self, x: Var) -> Result<Var> {
        let centred = self.tape.add_scalar(x, -0.5);
        let scaled = self.tape.scale(centred, INPUT_SCALE);
        let mut h = self.conv(self.net.stem, scaled)?;
        h = self.tape.relu(h);
        for i in 0..self.net.blocks.len() {
            h = self.conv(self.net.blocks[i], h)?;
            h = self.tape.relu(h);
        }
        Ok(h)
    }

    /// Multi-channel attention mask `M^k`, same shape as `feat`.
    pub fn mask(&mut self, k: usize, feat: Var) -> Result<Var> {
        self.net.check_attribute(k)?;
        self.check_feature(feat)?;
        let g = self.net.mask_generators[k].clone();
        let mut h = self.conv(g.conv1, feat)?;
        h = self.tape.relu(h);
        h = self.conv(g.conv2, h)?;
        h = self.tape.relu(h);
        h = self.conv(g.project, h)?;
        Ok(self.tape.sigmoid(h))
    }

    /// Probability `[B]` that attribute `k` is present.
    pub fn binary_head(&mut self, k: usize, masked: Var) -> Result<Var> {
        self.net.check_attribute(k)?;
        self.check_feature(masked)?;
        let head = self.net.binary_heads[k].clone();
        let mut h = self.conv(head.conv, masked)?;
        h = self.tape.relu(h);
        h = self.global_avg_pool(h)?;
        h = self.dense(head.dense, h)?;
        let batch = self.tape.shape(h)[0];
        let h = self.tape.reshape(h, vec![batch])?;
        Ok(self.tape.sigmoid(h))
    }

    /// Attribute `k` prediction and its raw mask.
    ///
    /// `None` is the training form `(1 + M) * f` with gradients through the
    /// mask; `Some(params)` applies `1 + g(M; n, beta)` as a constant.
    pub fn attribute(&mut self, k: usize, feat: Var, transform: Option<TransformParams>) -> Result<(Var, Var)> {
        let mask = self.mask(k, feat)?;
        let multiplier = match transform {
            None => self.tape.add_scalar(mask, 1.0),
            Some(params) => {
                let m = transform_mask(self.tape.value(mask), params)?;
                self.tape.constant(m)
            }
        };
        let masked = self.tape.mul(multiplier, feat)?;
        Ok((self.binary_head(k, masked)?, mask))
    }

    /// Multi-label probabilities `[B, K]` from unmasked features.
    pub fn multilabel(&mut self, feat: Var) -> Result<Var> {
        let layer = self.net.multilabel.ok_or(Error::Disabled("multi-label head"))?;
        self.check_feature(feat)?;
        let pooled = self.global_avg_pool(feat)?;
        let logits = self.dense(layer, pooled)?;
        Ok(self.tape.sigmoid(logits))
    }

    /// Image-shaped reconstruction `[B, Cimg, H, W]`.
    pub fn reconstruct(&mut self, feat: Var) -> Result<Var> {
        let r = self.net.reconstructor.clone().ok_or(Error::Disabled("reconstructor"))?;
        self.check_feature(feat)?;
        let mut h = self.conv(r.squeeze, feat)?;
        h = self.tape.relu(h);
        h = self.tape.upsample_nearest(h, 2)?;
        h = self.conv(r.out, h)?;
        Ok(self.tape.sigmoid(h))
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradient for each parameter in network order (`None` if unreached).
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|&v| self.tape.grad(v).map(<[f64]>::to_vec))
            .collect()
    }
}
