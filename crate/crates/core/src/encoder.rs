//! Desk-scale FPN encoder producing three-level embeddings and logits.
//!
//! The backbone is a four-stage convolutional net ("TinyFPN"): a two-conv
//! stem at stride 4, stages C2..C5 at strides 4/8/16/32, then a top-down
//! pyramid. Lateral 1x1 convs project every C level to `fpn_channels`; the
//! fused map at level i is the lateral plus the 2x-upsampled fused map from
//! level i+1 (sums happen before smoothing), and each P level is a 3x3
//! smoothing conv over its fused map. Projection heads are single affine
//! maps on globally pooled P2 / P4 / P5; the classifier is an affine map on
//! the global embedding.
//!
//! Parameters and BatchNorm running statistics live in name-keyed maps so
//! checkpoints, optimizer slots and trainability scopes can all address them
//! by the same stable strings.

use std::collections::BTreeMap;

use crate::autodiff::{Init, Parameter, Phase, RunningStats, Tape, TapeId, Tensor};
use crate::rng;
use crate::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Architecture hyperparameters. All channel counts must be positive and the
/// input must be divisible by the overall stride (32 with the downsampling
/// stem, 8 with the stride-1 stem used for tiny gradient-check inputs).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub fpn_channels: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub input_hw: usize,
    /// Stride-2 stem convs (the normal layout). Disabled for tiny inputs,
    /// where both stem convs run at stride 1 and the overall stride drops
    /// from 32 to 8.
    pub stem_downsample: bool,
    /// Append ReLU to the head projections (off: heads are plain affine).
    pub head_relu: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            stem_channels: 8,
            stage_channels: [8, 16, 32, 64],
            fpn_channels: 32,
            embed_dim: 32,
            num_classes: 4,
            input_hw: 64,
            stem_downsample: true,
            head_relu: false,
        }
    }
}

impl BackboneConfig {
    pub fn overall_stride(&self) -> usize {
        if self.stem_downsample {
            32
        } else {
            8
        }
    }

    pub fn validate(&self) -> Result<()> {
        let channels = [self.in_channels, self.stem_channels, self.fpn_channels, self.embed_dim];
        if channels.iter().chain(&self.stage_channels).any(|&c| c == 0) {
            return Err(Error::ConfigError("all channel counts must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::ConfigError(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let stride = self.overall_stride();
        if self.input_hw < stride || self.input_hw % stride != 0 {
            return Err(Error::ConfigError(format!(
                "input_hw must be a positive multiple of {stride}, got {}",
                self.input_hw
            )));
        }
        Ok(())
    }
}

/// Backbone and pyramid maps for one view, as tape nodes. C levels carry the
/// stage channel counts at strides 4/8/16/32; P levels carry fpn_channels at
/// the same resolutions.
#[derive(Debug, Clone, Copy)]
pub struct PyramidFeatures {
    pub c2: TapeId,
    pub c3: TapeId,
    pub c4: TapeId,
    pub c5: TapeId,
    pub p2: TapeId,
    pub p3: TapeId,
    pub p4: TapeId,
    pub p5: TapeId,
}

/// The three per-video embeddings of one view.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTriple {
    pub local: TapeId,
    pub medium: TapeId,
    pub global_: TapeId,
}

/// Everything one view's forward pass produces.
#[derive(Debug, Clone, Copy)]
pub struct ViewOutput {
    pub pyramid: PyramidFeatures,
    pub embeddings: EmbeddingTriple,
    pub logits: TapeId,
}

/// Tape ids for every parameter of one bound forward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    ids: BTreeMap<String, TapeId>,
}

impl Binding {
    /// Pair up names and externally created leaves (the gradient checker
    /// owns its own leaf values).
    pub fn from_parts(names: &[String], ids: &[TapeId]) -> Result<Self> {
        if names.len() != ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "binding: {} names for {} ids",
                names.len(),
                ids.len()
            )));
        }
        Ok(Binding {
            ids: names.iter().cloned().zip(ids.iter().copied()).collect(),
        })
    }

    pub fn id(&self, name: &str) -> Result<TapeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::ConfigError(format!("model has no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TapeId)> {
        self.ids.iter().map(|(n, &id)| (n.as_str(), id))
    }
}

/// Expected parameter layout for a config: (name, shape, weight-like). The
/// order is the canonical serialization order.
pub(crate) fn param_specs(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>, Init)> {
    fn conv(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, cout: usize, cin: usize, k: usize) {
        specs.push((format!("{name}.w"), vec![cout, cin, k, k], Init::Kaiming { seed: 0 }));
    }
    fn affine(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize) {
        specs.push((format!("{name}.gamma"), vec![c], Init::Ones));
        specs.push((format!("{name}.beta"), vec![c], Init::Zeros));
    }
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();

    let s = cfg.stem_channels;
    let [c2, c3, c4, c5] = cfg.stage_channels;
    let f = cfg.fpn_channels;
    let e = cfg.embed_dim;

    conv(&mut specs, "stem.conv1", s, cfg.in_channels, 3);
    affine(&mut specs, "stem.bn1", s);
    conv(&mut specs, "stem.conv2", s, s, 3);
    affine(&mut specs, "stem.bn2", s);

    for (idx, (cin, cout)) in [(s, c2), (c2, c3), (c3, c4), (c4, c5)].into_iter().enumerate() {
        let stage = idx + 2;
        conv(&mut specs, &format!("stage{stage}.conv1"), cout, cin, 3);
        affine(&mut specs, &format!("stage{stage}.bn1"), cout);
        conv(&mut specs, &format!("stage{stage}.conv2"), cout, cout, 3);
        affine(&mut specs, &format!("stage{stage}.bn2"), cout);
    }

    for (level, cin) in [(2, c2), (3, c3), (4, c4), (5, c5)] {
        conv(&mut specs, &format!("fpn.lateral{level}"), f, cin, 1);
        affine(&mut specs, &format!("fpn.lateral{level}"), f);
    }
    for level in 2..=5 {
        conv(&mut specs, &format!("fpn.smooth{level}"), f, f, 3);
        affine(&mut specs, &format!("fpn.smooth{level}"), f);
    }

    for head in ["local", "medium", "global"] {
        specs.push((format!("heads.{head}.w"), vec![f, e], Init::Kaiming { seed: 0 }));
        specs.push((format!("heads.{head}.b"), vec![e], Init::Zeros));
    }
    specs.push(("classifier.w".into(), vec![e, cfg.num_classes], Init::Kaiming { seed: 0 }));
    specs.push(("classifier.b".into(), vec![cfg.num_classes], Init::Zeros));
    specs
}

/// BatchNorm unit names for a config, in serialization order.
fn bn_keys() -> Vec<String> {
    let mut keys = vec!["stem.bn1".to_string(), "stem.bn2".to_string()];
    for stage in 2..=5 {
        keys.push(format!("stage{stage}.bn1"));
        keys.push(format!("stage{stage}.bn2"));
    }
    for level in 2..=5 {
        keys.push(format!("fpn.lateral{level}"));
    }
    for level in 2..=5 {
        keys.push(format!("fpn.smooth{level}"));
    }
    keys
}

fn bn_channels(cfg: &BackboneConfig, key: &str) -> usize {
    let [c2, c3, c4, c5] = cfg.stage_channels;
    match key {
        "stem.bn1" | "stem.bn2" => cfg.stem_channels,
        "stage2.bn1" | "stage2.bn2" => c2,
        "stage3.bn1" | "stage3.bn2" => c3,
        "stage4.bn1" | "stage4.bn2" => c4,
        "stage5.bn1" | "stage5.bn2" => c5,
        _ => cfg.fpn_channels,
    }
}

/// The encoder: config, parameter tensors and BatchNorm running statistics.
/// Forward passes record onto an externally owned tape through a [`Binding`];
/// the struct itself only changes when BatchNorm folds batch statistics into
/// its running estimates (train phase) or when the optimizer writes updated
/// parameter values back.
#[derive(Debug, Clone)]
pub struct TinyFpn {
    cfg: BackboneConfig,
    params: BTreeMap<String, Tensor>,
    running: BTreeMap<String, RunningStats>,
}

impl TinyFpn {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = BTreeMap::new();
        for (name, dims, init) in param_specs(&cfg) {
            // Every tensor draws from its own name-derived stream so the
            // initialization is independent of construction order.
            let init = match init {
                Init::Kaiming { .. } => Init::Kaiming { seed: rng::derive(seed, &name) },
                other => other,
            };
            params.insert(name, Tensor::create(&dims, init)?);
        }
        let running = bn_keys()
            .into_iter()
            .map(|key| {
                let c = bn_channels(&cfg, &key);
                (key, RunningStats::new(c))
            })
            .collect();
        Ok(TinyFpn { cfg, params, running })
    }

    /// Rebuild from deserialized parts, checking names and shapes. Accepts
    /// either the full parameter set or one with the task heads stripped.
    pub fn from_parts(
        cfg: BackboneConfig,
        params: BTreeMap<String, Tensor>,
        running: BTreeMap<String, RunningStats>,
    ) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        let has_heads = params.keys().any(|n| is_task_head(n));
        let mut expected = 0usize;
        for (name, dims, _) in &specs {
            if is_task_head(name) && !has_heads {
                continue;
            }
            expected += 1;
            let got = params
                .get(name)
                .ok_or_else(|| Error::FormatError(format!("checkpoint is missing parameter {name}")))?;
            if got.shape().dims() != &dims[..] {
                return Err(Error::FormatError(format!(
                    "parameter {name} has shape {}, expected {dims:?}",
                    got.shape()
                )));
            }
        }
        if params.len() != expected {
            let unknown: Vec<&String> = params
                .keys()
                .filter(|n| !specs.iter().any(|(sn, _, _)| sn == *n))
                .collect();
            return Err(Error::FormatError(format!(
                "checkpoint has {} parameters, expected {expected} (unknown: {unknown:?})",
                params.len()
            )));
        }
        for key in bn_keys() {
            let c = bn_channels(&cfg, &key);
            let stats = running
                .get(&key)
                .ok_or_else(|| Error::FormatError(format!("checkpoint is missing running stats for {key}")))?;
            if stats.mean.len() != c || stats.var.len() != c {
                return Err(Error::FormatError(format!(
                    "running stats for {key} have {} channels, expected {c}",
                    stats.mean.len()
                )));
            }
        }
        if running.len() != bn_keys().len() {
            return Err(Error::FormatError(format!(
                "checkpoint has {} running-stat entries, expected {}",
                running.len(),
                bn_keys().len()
            )));
        }
        Ok(TinyFpn { cfg, params, running })
    }

    pub fn cfg(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Parameters cloned out in name order, for the gradient checker.
    pub fn named_parameters(&self) -> Vec<Parameter> {
        self.params.iter().map(|(n, t)| Parameter::new(n.clone(), t.clone())).collect()
    }

    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.running.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn running_stats_mut(&mut self, key: &str) -> Option<&mut RunningStats> {
        self.running.get_mut(key)
    }

    /// Drop the projection heads and the pretraining classifier, keeping the
    /// backbone and pyramid. Downstream tasks attach their own classifier.
    pub fn discard_task_heads(&mut self) {
        self.params.retain(|name, _| !is_task_head(name));
    }

    pub fn has_task_heads(&self) -> bool {
        self.params.keys().any(|n| is_task_head(n))
    }

    /// Leaves for every parameter on the given tape. `trainable` decides per
    /// name whether gradients flow into that leaf.
    pub fn bind<F: Fn(&str) -> bool>(&self, tape: &mut Tape, trainable: F) -> Binding {
        let ids = self
            .params
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone(), trainable(name))))
            .collect();
        Binding { ids }
    }

    fn conv_bn_relu(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        x: TapeId,
        conv: &str,
        bn: &str,
        stride: usize,
        pad: usize,
        phase: Phase,
    ) -> Result<TapeId> {
        let w = binding.id(&format!("{conv}.w"))?;
        let gamma = binding.id(&format!("{bn}.gamma"))?;
        let beta = binding.id(&format!("{bn}.beta"))?;
        let stats = self
            .running
            .get_mut(bn)
            .ok_or_else(|| Error::ConfigError(format!("model has no BatchNorm unit named {bn}")))?;
        let y = tape.conv2d(x, w, stride, pad)?;
        let y = tape.batchnorm2d(y, gamma, beta, stats, phase, BN_MOMENTUM, BN_EPS)?;
        tape.relu(y)
    }

    /// Stem and stages: frames [N, in_channels, S, S] to (C2, C3, C4, C5).
    pub fn backbone_forward(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        frames: TapeId,
        phase: Phase,
    ) -> Result<[TapeId; 4]> {
        let (_, c, h, w) = tape.value(frames).shape().as_4d()?;
        if c != self.cfg.in_channels || h != self.cfg.input_hw || w != self.cfg.input_hw {
            return Err(Error::ShapeMismatch(format!(
                "backbone expects [N, {}, {}, {}] frames, got {}",
                self.cfg.in_channels,
                self.cfg.input_hw,
                self.cfg.input_hw,
                tape.value(frames).shape()
            )));
        }
        let stem_stride = if self.cfg.stem_downsample { 2 } else { 1 };
        let x = self.conv_bn_relu(tape, binding, frames, "stem.conv1", "stem.bn1", stem_stride, 1, phase)?;
        let x = self.conv_bn_relu(tape, binding, x, "stem.conv2", "stem.bn2", stem_stride, 1, phase)?;

        let mut maps = [x; 4];
        let mut cur = x;
        for (idx, slot) in maps.iter_mut().enumerate() {
            let stage = idx + 2;
            let stride = if stage == 2 { 1 } else { 2 };
            let conv1 = format!("stage{stage}.conv1");
            let bn1 = format!("stage{stage}.bn1");
            let conv2 = format!("stage{stage}.conv2");
            let bn2 = format!("stage{stage}.bn2");
            cur = self.conv_bn_relu(tape, binding, cur, &conv1, &bn1, stride, 1, phase)?;
            cur = self.conv_bn_relu(tape, binding, cur, &conv2, &bn2, 1, 1, phase)?;
            *slot = cur;
        }
        Ok(maps)
    }

    /// Top-down pyramid: lateral projections, upsample-and-add fusion on the
    /// pre-smoothing sums, then a smoothing conv per level.
    pub fn fpn_forward(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        c: [TapeId; 4],
        phase: Phase,
    ) -> Result<[TapeId; 4]> {
        let mut lat = [c[0]; 4];
        for (i, slot) in lat.iter_mut().enumerate() {
            let level = i + 2;
            let name = format!("fpn.lateral{level}");
            *slot = self.conv_bn_relu(tape, binding, c[i], &name, &name, 1, 0, phase)?;
        }
        let mut fused = [lat[3]; 4];
        for i in (0..3).rev() {
            let up = tape.upsample2x(fused[i + 1])?;
            fused[i] = tape.add(lat[i], up)?;
        }
        let mut p = fused;
        for (i, slot) in p.iter_mut().enumerate() {
            let level = i + 2;
            let name = format!("fpn.smooth{level}");
            *slot = self.conv_bn_relu(tape, binding, fused[i], &name, &name, 1, 1, phase)?;
        }
        Ok(p)
    }

    /// Pooled projections of P2, P4 and P5 to the three embedding rows.
    pub fn heads_forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        p2: TapeId,
        p4: TapeId,
        p5: TapeId,
    ) -> Result<EmbeddingTriple> {
        let mut project = |p: TapeId, head: &str| -> Result<TapeId> {
            let pooled = tape.global_avg_pool(p)?;
            let w = binding.id(&format!("heads.{head}.w"))?;
            let b = binding.id(&format!("heads.{head}.b"))?;
            let out = tape.linear(pooled, w, b)?;
            if self.cfg.head_relu {
                tape.relu(out)
            } else {
                Ok(out)
            }
        };
        Ok(EmbeddingTriple {
            local: project(p2, "local")?,
            medium: project(p4, "medium")?,
            global_: project(p5, "global")?,
        })
    }

    /// Affine classifier on the global embedding; softmax lives inside the
    /// loss.
    pub fn classify(&self, tape: &mut Tape, binding: &Binding, global_: TapeId) -> Result<TapeId> {
        let w = binding.id("classifier.w")?;
        let b = binding.id("classifier.b")?;
        tape.linear(global_, w, b)
    }

    /// Full single-view pass: backbone, pyramid, heads, classifier.
    pub fn forward_view(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        frames: Tensor,
        phase: Phase,
    ) -> Result<ViewOutput> {
        let frames = tape.constant(frames);
        let c = self.backbone_forward(tape, binding, frames, phase)?;
        let p = self.fpn_forward(tape, binding, c, phase)?;
        let embeddings = self.heads_forward(tape, binding, p[0], p[2], p[3])?;
        let logits = self.classify(tape, binding, embeddings.global_)?;
        Ok(ViewOutput {
            pyramid: PyramidFeatures {
                c2: c[0],
                c3: c[1],
                c4: c[2],
                c5: c[3],
                p2: p[0],
                p3: p[1],
                p4: p[2],
                p5: p[3],
            },
            embeddings,
            logits,
        })
    }

    /// Both views on one tape and binding, view one first; in train phase
    /// each view's BatchNorm uses its own batch statistics, folded into the
    /// running estimates in that order.
    pub fn forward_pair(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        view1: Tensor,
        view2: Tensor,
        phase: Phase,
    ) -> Result<(ViewOutput, ViewOutput)> {
        if view1.shape() != view2.shape() {
            return Err(Error::ShapeMismatch(format!(
                "paired views must share a shape, got {} vs {}",
                view1.shape(),
                view2.shape()
            )));
        }
        let out1 = self.forward_view(tape, binding, view1, phase)?;
        let out2 = self.forward_view(tape, binding, view2, phase)?;
        Ok((out1, out2))
    }
}

/// Parameters that belong to the pretraining task rather than the backbone.
pub fn is_task_head(name: &str) -> bool {
    name.starts_with("heads.") || name.starts_with("classifier.")
}

/// Trainability predicate for the fine-tuning scope that unfreezes only the
/// final backbone stage and the pyramid smoothing convs (the downstream
/// classifier is owned by the caller and always trains).
pub fn in_last3_scope(name: &str) -> bool {
    name.starts_with("stage5.") || name.starts_with("fpn.smooth")
}
