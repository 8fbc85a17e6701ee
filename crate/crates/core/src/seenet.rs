//! The three-branch self-erasing attention network.
//!
//! A shared convolutional backbone feeds three classifier heads. Head A sees
//! rectified backbone features and yields the initial attention. Its
//! attention is thresholded into a ternary mask that drives the C-ReLU in
//! front of head B (erase / keep / reverse) and a binary background mask in
//! front of head C, which is trained to predict no class at all. Masks are
//! built from values only, so no gradient flows through their construction.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::masks::{self, AttentionMap, TernaryMask, Thresholds};
use crate::tensor::{ops, Graph, MaskMap, Real, Tensor, Var};

/// One backbone conv block (3x3 conv + ReLU).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub backbone: Vec<BlockSpec>,
    /// Width of the three 3x3 convs in every branch.
    pub branch_channels: usize,
    pub branch_depth: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Desk-scale network: 16/32/64/64 backbone with two stride-2 blocks and
    /// 64-channel branches.
    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            in_channels: 3,
            backbone: vec![
                BlockSpec {
                    channels: 16,
                    stride: 1,
                },
                BlockSpec {
                    channels: 32,
                    stride: 2,
                },
                BlockSpec {
                    channels: 64,
                    stride: 2,
                },
                BlockSpec {
                    channels: 64,
                    stride: 1,
                },
            ],
            branch_channels: 64,
            branch_depth: 3,
            num_classes,
        }
    }

    /// Same topology with every width multiplied by `scale`.
    pub fn widened(mut self, scale: f64) -> Self {
        let w = |c: usize| ((c as f64 * scale).round() as usize).max(1);
        for b in &mut self.backbone {
            b.channels = w(b.channels);
        }
        self.branch_channels = w(self.branch_channels);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        if self.backbone.is_empty() {
            return bad("backbone needs at least one block".into());
        }
        if let Some(b) = self
            .backbone
            .iter()
            .find(|b| b.channels == 0 || b.stride == 0)
        {
            return bad(format!("invalid backbone block {b:?}"));
        }
        if self.branch_channels == 0 || self.branch_depth == 0 {
            return bad("branch width and depth must be >= 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        Ok(())
    }

    /// Spatial size of the backbone output for a square input.
    pub fn feature_side(&self, input_side: usize) -> usize {
        self.backbone
            .iter()
            .fold(input_side, |s, b| (s + 2 - 3) / b.stride + 1)
    }
}

/// Which mask post-processing is applied before branches B and C.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Erase only: background codes become `+1`, no third branch.
    Acol,
    /// Background features are zeroed instead of reversed.
    Zeroing,
    /// Full self-erasing: ternary mask for B, background mask for C.
    Seenet,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Acol, Strategy::Zeroing, Strategy::Seenet];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Acol => "acol",
            Strategy::Zeroing => "zeroing",
            Strategy::Seenet => "seenet",
        }
    }

    pub fn uses_branch_c(self) -> bool {
        !matches!(self, Strategy::Acol)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub strategy: Strategy,
    pub thresholds: Thresholds,
}

impl MaskPolicy {
    pub fn new(strategy: Strategy, thresholds: Thresholds) -> Result<Self> {
        thresholds.validate()?;
        Ok(MaskPolicy {
            strategy,
            thresholds,
        })
    }

    /// Masks for branches B and C derived from the branch-A attention.
    ///
    /// During warmup B sees raw rectified features and C sees nothing.
    pub fn masks<T: Real>(&self, m_a: &AttentionMap<T>, warmup: bool) -> Result<BranchMasks> {
        let t_a = masks::ternary_mask(m_a, self.thresholds)?;
        let (h, w) = m_a.shape();
        let with_c = self.strategy.uses_branch_c();
        if warmup {
            return Ok(BranchMasks {
                t_a,
                b: MaskMap::ones(h, w),
                c: with_c.then(|| MaskMap::zeros(h, w)),
            });
        }
        let b = match self.strategy {
            Strategy::Seenet => masks::mask_for_sb(&t_a),
            Strategy::Zeroing => t_a.as_mask().remap(masks::BACKGROUND, 0),
            Strategy::Acol => t_a.as_mask().remap(masks::BACKGROUND, masks::POTENTIAL),
        };
        let c = with_c
            .then(|| masks::mask_for_sc(m_a, self.thresholds))
            .transpose()?;
        Ok(BranchMasks { t_a, b, c })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchMasks {
    pub t_a: TernaryMask,
    pub b: MaskMap,
    /// `None` when the strategy has no third branch.
    pub c: Option<MaskMap>,
}

/// Multi-hot target over the `M` model classes (channel indices `0..M`).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector<T = f32> {
    values: Tensor<T>,
}

impl<T: Real> LabelVector<T> {
    pub fn from_classes(classes: &[usize], num_classes: usize) -> Result<Self> {
        let mut values = Tensor::zeros(&[num_classes]);
        for &c in classes {
            contract!(
                c < num_classes,
                "label {} out of range for {} classes",
                c,
                num_classes
            );
            values.data_mut()[c] = T::one();
        }
        Ok(LabelVector { values })
    }

    /// The all-zero target used for branch C.
    pub fn zeros(num_classes: usize) -> Self {
        LabelVector {
            values: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn classes(&self) -> Vec<usize> {
        self.values
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == T::one())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.values.numel() == 0
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.values
    }
}

/// Class-activation attention: per-pixel max over `labels` of the rectified
/// class maps of a `[M, H, W]` tensor.
pub fn compute_attention<T: Real>(
    class_maps: &Tensor<T>,
    labels: &[usize],
) -> Result<AttentionMap<T>> {
    let (m, h, w) = class_maps.dims3()?;
    contract!(
        !labels.is_empty(),
        "compute_attention needs at least one label"
    );
    if let Some(&c) = labels.iter().find(|&&c| c >= m) {
        return Err(Error::Contract(format!(
            "label {c} out of range for {m} class maps"
        )));
    }
    let plane = h * w;
    let data = class_maps.data();
    let mut values = vec![T::zero(); plane];
    for &c in labels {
        for (v, &x) in values.iter_mut().zip(&data[c * plane..(c + 1) * plane]) {
            *v = v.max(x);
        }
    }
    AttentionMap::new(h, w, values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> ConvLayer<T> {
    fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
        ConvLayer {
            weight: Tensor::from_fn(&[c_out, c_in, k, k], |_| T::lit(normal.sample(rng))),
            bias: Tensor::zeros(&[c_out]),
            stride,
            pad: k / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T = f32> {
    pub convs: Vec<ConvLayer<T>>,
    /// `M`-channel 1x1 conv producing the class maps.
    pub classifier: ConvLayer<T>,
}

/// Branch indices into [`SeeNetModel::branches`].
pub const BRANCH_A: usize = 0;
pub const BRANCH_B: usize = 1;
pub const BRANCH_C: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SeeNetModel<T = f32> {
    config: ModelConfig,
    pub backbone: Vec<ConvLayer<T>>,
    pub branches: [Branch<T>; 3],
}

/// Graph handles for every parameter, in [`SeeNetModel::params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    flat: Vec<Var>,
    backbone_len: usize,
    branch_depth: usize,
}

impl ModelVars {
    pub fn flat(&self) -> &[Var] {
        &self.flat
    }

    /// Substitutes the handle of one parameter (used by gradient checks).
    pub fn replace(&mut self, index: usize, var: Var) {
        self.flat[index] = var;
    }

    fn backbone_layer(&self, i: usize) -> (Var, Var) {
        (self.flat[2 * i], self.flat[2 * i + 1])
    }

    fn branch_layer(&self, branch: usize, layer: usize) -> (Var, Var) {
        let base = 2 * self.backbone_len + branch * 2 * (self.branch_depth + 1) + 2 * layer;
        (self.flat[base], self.flat[base + 1])
    }
}

/// Values produced by one training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs<T = f32> {
    pub logits_a: Tensor<T>,
    pub logits_b: Tensor<T>,
    pub logits_c: Option<Tensor<T>>,
    pub m_a: AttentionMap<T>,
    pub m_b: AttentionMap<T>,
    pub t_a: TernaryMask,
    pub mask_b: MaskMap,
    pub mask_c: Option<MaskMap>,
}

impl<T: Real> BranchOutputs<T> {
    /// `bce(A, y) + bce(B, y) + bce(C, 0)` computed from values alone.
    pub fn total_loss_value(&self, labels: &LabelVector<T>) -> Result<T> {
        let mut total = ops::bce_multilabel_loss(&self.logits_a, labels.as_tensor())?
            + ops::bce_multilabel_loss(&self.logits_b, labels.as_tensor())?;
        if let Some(c) = &self.logits_c {
            total =
                total + ops::bce_multilabel_loss(c, LabelVector::zeros(labels.len()).as_tensor())?;
        }
        Ok(total)
    }
}

/// Graph handles of a training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PassVars {
    pub features: Var,
    pub logits_a: Var,
    pub logits_b: Var,
    pub logits_c: Option<Var>,
    /// Output of the C-ReLU in front of branch B.
    pub input_b: Var,
    /// Output of the C-ReLU in front of branch C.
    pub input_c: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass<T = f32> {
    pub outputs: BranchOutputs<T>,
    pub vars: PassVars,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub a: Var,
    pub b: Var,
    pub c: Option<Var>,
    pub total: Var,
}

impl<T: Real> SeeNetModel<T> {
    /// He-initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = config.in_channels;
        let mut backbone = Vec::with_capacity(config.backbone.len());
        for b in &config.backbone {
            backbone.push(ConvLayer::init(
                c_in, b.channels, 3, b.stride, 2.0, &mut rng,
            ));
            c_in = b.channels;
        }
        let feat = c_in;
        let make_branch = |rng: &mut ChaCha8Rng| {
            let mut c = feat;
            let convs = (0..config.branch_depth)
                .map(|_| {
                    let l = ConvLayer::init(c, config.branch_channels, 3, 1, 2.0, rng);
                    c = config.branch_channels;
                    l
                })
                .collect();
            Branch {
                convs,
                classifier: ConvLayer::init(c, config.num_classes, 1, 1, 1.0, rng),
            }
        };
        let branches = [
            make_branch(&mut rng),
            make_branch(&mut rng),
            make_branch(&mut rng),
        ];
        Ok(SeeNetModel {
            config,
            backbone,
            branches,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        self.backbone.iter().chain(
            self.branches
                .iter()
                .flat_map(|b| b.convs.iter().chain(std::iter::once(&b.classifier))),
        )
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer<T>> {
        self.backbone.iter_mut().chain(
            self.branches
                .iter_mut()
                .flat_map(|b| b.convs.iter_mut().chain(std::iter::once(&mut b.classifier))),
        )
    }

    /// All parameters in a fixed order: weight then bias of each layer.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Indices into [`Self::params`] belonging to the backbone.
    pub fn backbone_param_range(&self) -> std::ops::Range<usize> {
        0..2 * self.backbone.len()
    }

    pub fn cast<U: Real>(&self) -> SeeNetModel<U> {
        let cast_layer = |l: &ConvLayer<T>| ConvLayer {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
            stride: l.stride,
            pad: l.pad,
        };
        let cast_branch = |b: &Branch<T>| Branch {
            convs: b.convs.iter().map(cast_layer).collect(),
            classifier: cast_layer(&b.classifier),
        };
        SeeNetModel {
            config: self.config.clone(),
            backbone: self.backbone.iter().map(cast_layer).collect(),
            branches: [
                cast_branch(&self.branches[0]),
                cast_branch(&self.branches[1]),
                cast_branch(&self.branches[2]),
            ],
        }
    }

    fn register_with(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        let flat = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        ModelVars {
            flat,
            backbone_len: self.backbone.len(),
            branch_depth: self.config.branch_depth,
        }
    }

    /// Records all parameters as trainable leaves.
    pub fn register(&self, g: &mut Graph<T>) -> ModelVars {
        self.register_with(g, true)
    }

    /// Records all parameters as constants (inference).
    pub fn register_frozen(&self, g: &mut Graph<T>) -> ModelVars {
        self.register_with(g, false)
    }

    /// Backbone output before its final rectifier.
    pub fn backbone_features(&self, g: &mut Graph<T>, vars: &ModelVars, image: Var) -> Result<Var> {
        let mut x = image;
        for (i, layer) in self.backbone.iter().enumerate() {
            if i > 0 {
                x = g.relu(x);
            }
            let (w, b) = vars.backbone_layer(i);
            x = g.conv2d(x, w, b, layer.stride, layer.pad)?;
        }
        Ok(x)
    }

    /// Runs one branch on already-activated features; returns (logits, class maps).
    pub fn branch_head(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        branch: usize,
        input: Var,
    ) -> Result<(Var, Var)> {
        let spec = &self.branches[branch];
        let mut x = input;
        for (j, layer) in spec.convs.iter().enumerate() {
            let (w, b) = vars.branch_layer(branch, j);
            x = g.conv2d(x, w, b, layer.stride, layer.pad)?;
            x = g.relu(x);
        }
        let (w, b) = vars.branch_layer(branch, spec.convs.len());
        let maps = g.conv2d(x, w, b, 1, 0)?;
        let logits = g.global_avg_pool(maps)?;
        Ok((logits, maps))
    }

    /// Full three-branch pass with masks supplied by `make_masks` from the
    /// branch-A attention.
    pub fn forward_with_masks<F>(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        image: &Tensor<T>,
        labels: &LabelVector<T>,
        make_masks: F,
    ) -> Result<ForwardPass<T>>
    where
        F: FnOnce(&AttentionMap<T>) -> Result<BranchMasks>,
    {
        let (c, _, _) = image.dims3()?;
        contract!(
            c == self.config.in_channels,
            "image has {} channels, model expects {}",
            c,
            self.config.in_channels
        );
        contract!(
            labels.len() == self.config.num_classes,
            "label vector has {} entries, model has {} classes",
            labels.len(),
            self.config.num_classes
        );
        let classes = labels.classes();
        let input = g.constant(center_image(image));
        let features = self.backbone_features(g, vars, input)?;

        let input_a = g.relu(features);
        let (logits_a, maps_a) = self.branch_head(g, vars, BRANCH_A, input_a)?;
        let m_a = compute_attention(g.value(maps_a), &classes)?;
        let masks = make_masks(&m_a)?;

        let input_b = g.c_relu(features, &masks.b)?;
        let (logits_b, maps_b) = self.branch_head(g, vars, BRANCH_B, input_b)?;
        let m_b = compute_attention(g.value(maps_b), &classes)?;

        let (logits_c, input_c) = match &masks.c {
            Some(mask) => {
                let input_c = g.c_relu(features, mask)?;
                let (logits_c, _) = self.branch_head(g, vars, BRANCH_C, input_c)?;
                (Some(logits_c), Some(input_c))
            }
            None => (None, None),
        };

        let outputs = BranchOutputs {
            logits_a: g.value(logits_a).clone(),
            logits_b: g.value(logits_b).clone(),
            logits_c: logits_c.map(|v| g.value(v).clone()),
            m_a,
            m_b,
            t_a: masks.t_a,
            mask_b: masks.b,
            mask_c: masks.c,
        };
        Ok(ForwardPass {
            outputs,
            vars: PassVars {
                features,
                logits_a,
                logits_b,
                logits_c,
                input_b,
                input_c,
            },
        })
    }

    /// Training forward pass: masks come from `policy` (or warmup masks).
    pub fn forward_train(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        image: &Tensor<T>,
        labels: &LabelVector<T>,
        policy: &MaskPolicy,
        warmup: bool,
    ) -> Result<ForwardPass<T>> {
        self.forward_with_masks(g, vars, image, labels, |m_a| policy.masks(m_a, warmup))
    }

    /// Branch-A and branch-B attention for an image, without recording gradients.
    pub fn attention_maps(
        &self,
        image: &Tensor<T>,
        labels: &LabelVector<T>,
        policy: &MaskPolicy,
    ) -> Result<(AttentionMap<T>, AttentionMap<T>)> {
        let mut g = Graph::new();
        let vars = self.register_frozen(&mut g);
        let pass = self.forward_with_masks(&mut g, &vars, image, labels, |m_a| {
            let mut masks = policy.masks(m_a, false)?;
            // Branch C is discarded at test time.
            masks.c = None;
            Ok(masks)
        })?;
        Ok((pass.outputs.m_a, pass.outputs.m_b))
    }
}

/// Pixel value subtracted from every input channel before the backbone.
pub const INPUT_MEAN: f64 = 0.5;

/// Shifts an image in `[0, 1]` to be roughly zero-centered.
pub fn center_image<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let mean = T::lit(INPUT_MEAN);
    Tensor::from_fn(image.shape(), |i| image.data()[i] - mean)
}

/// Records `L_A + L_B + L_C` (C against the zero vector) on the graph.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    pass: &ForwardPass<T>,
    labels: &LabelVector<T>,
) -> Result<LossVars> {
    let a = g.bce_multilabel(pass.vars.logits_a, labels.as_tensor())?;
    let b = g.bce_multilabel(pass.vars.logits_b, labels.as_tensor())?;
    let mut total = g.add(a, b)?;
    let c = match pass.vars.logits_c {
        Some(logits_c) => {
            let c = g.bce_multilabel(logits_c, LabelVector::zeros(labels.len()).as_tensor())?;
            total = g.add(total, c)?;
            Some(c)
        }
        None => None,
    };
    Ok(LossVars { a, b, c, total })
}
