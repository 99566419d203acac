//! Pretraining loop: Adam, assembly of the hierarchical objective from the
//! three embedding levels, label-rate masking, baseline modes, checkpoints
//! and CSV step logs.
//!
//! Determinism contract: (dataset manifest, config, seed) fixes the whole
//! run bit-exactly. Per-epoch randomness is derived as
//! derive_u64(derive(seed, "epochs"), epoch), so a resumed run needs no
//! serialized RNG state: the completed-epoch count in the checkpoint is the
//! full position.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::{Phase, RunningStats, Shape, Tape, Tensor};
use crate::data::{make_batches, AugmentConfig, Dataset, FramePair};
use crate::encoder::{is_task_head, param_specs, BackboneConfig, TinyFpn};
use crate::losses::{self, LossWeights, SmoothDenominator};
use crate::rng;
use crate::wire::{self, Reader};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// ── configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Full objective: all peer and cross terms plus softened classification.
    Hico,
    /// Single-level contrastive baseline: global peer term only.
    VanillaCl,
    /// Supervised baseline: softened classification only, no contrastive part.
    ScratchSupervised,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Hico => "hico",
            TrainMode::VanillaCl => "vanilla_cl",
            TrainMode::ScratchSupervised => "scratch_supervised",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hico" => Ok(TrainMode::Hico),
            "vanilla_cl" => Ok(TrainMode::VanillaCl),
            "scratch_supervised" => Ok(TrainMode::ScratchSupervised),
            other => Err(Error::ConfigError(format!(
                "unknown mode {other}, expected hico | vanilla_cl | scratch_supervised"
            ))),
        }
    }
}

/// Which contrastive terms are enabled (ablation surface). Only consulted in
/// hico mode; vanilla_cl is pinned to the global peer term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermToggles {
    pub ll: bool,
    pub mm: bool,
    pub gg: bool,
    pub gl: bool,
    pub gm: bool,
}

impl TermToggles {
    pub fn all_on() -> Self {
        TermToggles { ll: true, mm: true, gg: true, gl: true, gm: true }
    }

    pub fn only_gg() -> Self {
        TermToggles { ll: false, mm: false, gg: true, gl: false, gm: false }
    }

    pub fn none() -> Self {
        TermToggles { ll: false, mm: false, gg: false, gl: false, gm: false }
    }

    /// Compact form for logs: enabled terms joined by '+', or "none".
    pub fn label(&self) -> String {
        let names = [
            (self.ll, "ll"),
            (self.mm, "mm"),
            (self.gg, "gg"),
            (self.gl, "gl"),
            (self.gm, "gm"),
        ];
        let on: Vec<&str> = names.iter().filter(|(f, _)| *f).map(|(_, n)| *n).collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(TermToggles::none());
        }
        let mut t = TermToggles::none();
        for part in s.split('+') {
            match part {
                "ll" => t.ll = true,
                "mm" => t.mm = true,
                "gg" => t.gg = true,
                "gl" => t.gl = true,
                "gm" => t.gm = true,
                other => {
                    return Err(Error::ConfigError(format!(
                        "unknown contrastive term {other}, expected ll|mm|gg|gl|gm joined by +"
                    )))
                }
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// false: classic Adam-with-L2 (decay added to the gradient).
    /// true: decoupled decay applied directly to the parameter.
    pub decoupled_weight_decay: bool,
    pub weights: LossWeights,
    pub mode: TrainMode,
    pub toggles: TermToggles,
    pub label_rate: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub backbone: BackboneConfig,
    /// Also checkpoint every k completed epochs; 0 means final only.
    pub checkpoint_every: usize,
}

impl PretrainConfig {
    /// Full-scale defaults: 300 epochs, batch 32.
    pub fn full_scale() -> Self {
        PretrainConfig { epochs: 300, batch_size: 32, ..PretrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::ConfigError("epochs must be positive".into()));
        }
        let min_batch = if self.mode == TrainMode::ScratchSupervised { 1 } else { 2 };
        if self.batch_size < min_batch {
            return Err(Error::ConfigError(format!(
                "mode {} needs batch_size >= {min_batch}, got {}",
                self.mode.as_str(),
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::ConfigError(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::ConfigError(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.label_rate) {
            return Err(Error::ConfigError(format!("label_rate must be in [0, 1], got {}", self.label_rate)));
        }
        self.weights.validate()?;
        self.augment.validate()?;
        self.backbone.validate()?;
        Ok(())
    }

    /// Contrastive toggles actually applied under the configured mode.
    pub fn effective_toggles(&self) -> TermToggles {
        match self.mode {
            TrainMode::Hico => self.toggles,
            TrainMode::VanillaCl => TermToggles::only_gg(),
            TrainMode::ScratchSupervised => TermToggles::none(),
        }
    }

    /// Weight on the softened classification part. The supervised baseline
    /// trains on the plain softened CE, so beta is forced to one there.
    pub fn effective_beta(&self) -> f64 {
        if self.mode == TrainMode::ScratchSupervised {
            1.0
        } else {
            self.weights.beta
        }
    }

    /// The softening denominator value under this config. The batch-derived
    /// variant always uses the configured batch size, even when the runtime
    /// batch was truncated.
    pub fn smooth_denominator_value(&self) -> usize {
        match self.weights.smooth_denominator {
            SmoothDenominator::BatchMinusOne => self.batch_size,
            SmoothDenominator::ClassesMinusOne => self.backbone.num_classes,
        }
    }
}

impl Default for PretrainConfig {
    /// Desk-scale defaults: 30 epochs, batch 8, everything else full-scale.
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 3e-4,
            weight_decay: 1e-4,
            decoupled_weight_decay: false,
            weights: LossWeights::default(),
            mode: TrainMode::Hico,
            toggles: TermToggles::all_on(),
            label_rate: 1.0,
            seed: 0,
            augment: AugmentConfig::default(),
            backbone: BackboneConfig::default(),
            checkpoint_every: 0,
        }
    }
}

// ── optimizer ───────────────────────────────────────────────────────────────

/// Adam moments, keyed by parameter name. Entries appear lazily, so a run
/// that only updates a subset of parameters carries state for exactly that
/// subset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn from_parts(m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>, t: u64) -> Result<Self> {
        if m.len() != v.len() || m.keys().zip(v.keys()).any(|(a, b)| a != b) {
            return Err(Error::FormatError("optimizer moment maps disagree on parameter names".into()));
        }
        Ok(AdamState { m, v, t })
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.m
            .iter()
            .zip(self.v.values())
            .map(|((name, m), v)| (name.as_str(), m, v))
    }
}

/// One Adam update over the gradients in `grads`. Classic form folds weight
/// decay into the gradient; the decoupled flag applies it to the parameter
/// directly instead.
pub fn adam_step(
    model: &mut TinyFpn,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    decoupled: bool,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (name, grad) in grads {
        if grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalFailure(format!("non-finite gradient for {name}")));
        }
        let param = model
            .param_mut(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("gradient for unknown parameter {name}")))?;
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient shape {} does not match parameter {name} {}",
                grad.shape(),
                param.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape().dims()).expect("parameter shape is valid"));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape().dims()).expect("parameter shape is valid"));
        let p = param.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let g = if decoupled { grad.data()[i] } else { grad.data()[i] + weight_decay * p[i] };
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if decoupled {
                p[i] -= lr * weight_decay * p[i];
            }
        }
    }
    Ok(())
}

// ── step and log records ────────────────────────────────────────────────────

/// Loss values of one completed step. `total` always equals
/// `effective_lambda-weighted contrastive + effective_beta * soften`
/// recomputed from the parts, to 1e-12.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepBreakdown {
    pub total: f64,
    pub con: f64,
    pub soften: f64,
    pub ll: f64,
    pub mm: f64,
    pub gg: f64,
    pub gl: f64,
    pub gm: f64,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub mode: TrainMode,
    pub losses: StepBreakdown,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "step,epoch,mode,loss_total,loss_con,loss_soften,l_ll,l_mm,l_gg,l_gl,l_gm,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.records.len() + 1));
        s.push_str(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let b = &r.losses;
            let _ = writeln!(
                s,
                "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:.6}",
                r.step,
                r.epoch,
                r.mode.as_str(),
                b.total,
                b.con,
                b.soften,
                b.ll,
                b.mm,
                b.gg,
                b.gl,
                b.gm,
                r.seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        wire::atomic_write(path, self.to_csv().as_bytes())
    }
}

// ── one training step ───────────────────────────────────────────────────────

fn stack_views(batch: &[FramePair], cfg: &BackboneConfig) -> Result<(Tensor, Tensor)> {
    let (c, s) = (cfg.in_channels, cfg.input_hw);
    let shape = Shape::new(&[batch.len(), c, s, s])?;
    let mut v1 = Vec::with_capacity(shape.numel());
    let mut v2 = Vec::with_capacity(shape.numel());
    for pair in batch {
        if pair.view1.shape().dims() != [c, s, s] {
            return Err(Error::ShapeMismatch(format!(
                "batch frame is {}, backbone expects [{c}, {s}, {s}]",
                pair.view1.shape()
            )));
        }
        v1.extend_from_slice(pair.view1.data());
        v2.extend_from_slice(pair.view2.data());
    }
    Ok((Tensor::from_vec(shape.clone(), v1)?, Tensor::from_vec(shape, v2)?))
}

/// Forward both views, assemble the mode's objective, backprop and apply one
/// Adam update. Returns the loss breakdown.
pub fn train_step(
    model: &mut TinyFpn,
    batch: &[FramePair],
    adam: &mut AdamState,
    cfg: &PretrainConfig,
) -> Result<StepBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let toggles = cfg.effective_toggles();
    let contrastive_on =
        toggles.ll || toggles.mm || toggles.gg || toggles.gl || toggles.gm;
    if contrastive_on && batch.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "contrastive terms need at least 2 videos per batch, got {}",
            batch.len()
        )));
    }

    let (view1, view2) = stack_views(batch, &cfg.backbone)?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, |_| true);
    let (o1, o2) = model.forward_pair(&mut tape, &binding, view1, view2, Phase::Train)?;

    let tau = cfg.weights.tau;
    let (e1, e2) = (o1.embeddings, o2.embeddings);
    let mut peer_terms = Vec::new();
    let mut cross_terms = Vec::new();
    let mut term_ids = [None; 5];
    if toggles.ll {
        let id = losses::peer_level_loss(&mut tape, e1.local, e2.local, tau)?;
        peer_terms.push(id);
        term_ids[0] = Some(id);
    }
    if toggles.mm {
        let id = losses::peer_level_loss(&mut tape, e1.medium, e2.medium, tau)?;
        peer_terms.push(id);
        term_ids[1] = Some(id);
    }
    if toggles.gg {
        let id = losses::peer_level_loss(&mut tape, e1.global_, e2.global_, tau)?;
        peer_terms.push(id);
        term_ids[2] = Some(id);
    }
    if toggles.gl {
        let id = losses::cross_level_loss(&mut tape, e1.global_, e2.global_, e1.local, e2.local, tau)?;
        cross_terms.push(id);
        term_ids[3] = Some(id);
    }
    if toggles.gm {
        let id = losses::cross_level_loss(&mut tape, e1.global_, e2.global_, e1.medium, e2.medium, tau)?;
        cross_terms.push(id);
        term_ids[4] = Some(id);
    }
    let l_con = losses::overall_contrastive(&mut tape, &peer_terms, &cross_terms, cfg.weights.lambda)?;

    // Softened classification over the labeled subset only, averaged by the
    // labeled count; an unlabeled batch contributes a defined zero.
    let labeled_count = batch.iter().filter(|p| p.labeled).count();
    let l_soften = if labeled_count == 0 {
        tape.scalar_const(0.0)?
    } else {
        let class_ids: Vec<usize> = batch.iter().map(|p| p.class_id as usize).collect();
        let targets = losses::soften_labels(
            &class_ids,
            cfg.backbone.num_classes,
            cfg.weights.alpha,
            cfg.smooth_denominator_value(),
        )?;
        let w = 1.0 / (2.0 * labeled_count as f64);
        let row_weights: Vec<f64> = batch.iter().map(|p| if p.labeled { w } else { 0.0 }).collect();
        losses::softened_ce(&mut tape, o1.logits, o2.logits, &targets, &row_weights)?
    };

    let total = losses::total_loss(&mut tape, l_con, l_soften, cfg.effective_beta())?;
    tape.backward(total)?;

    let scalar = |tape: &Tape, id: Option<crate::autodiff::TapeId>| -> Result<f64> {
        match id {
            None => Ok(0.0),
            Some(id) => tape.value(id).item(),
        }
    };
    let breakdown = StepBreakdown {
        total: tape.value(total).item()?,
        con: tape.value(l_con).item()?,
        soften: tape.value(l_soften).item()?,
        ll: scalar(&tape, term_ids[0])?,
        mm: scalar(&tape, term_ids[1])?,
        gg: scalar(&tape, term_ids[2])?,
        gl: scalar(&tape, term_ids[3])?,
        gm: scalar(&tape, term_ids[4])?,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NumericalFailure(format!("loss diverged: total = {}", breakdown.total)));
    }

    let mut grads = BTreeMap::new();
    for (name, id) in binding.iter() {
        grads.insert(name.to_string(), tape.grad_or_zeros(id)?);
    }
    adam_step(model, &grads, adam, cfg.lr, cfg.weight_decay, cfg.decoupled_weight_decay)?;
    Ok(breakdown)
}

// ── full runs ───────────────────────────────────────────────────────────────

/// Callbacks at epoch boundaries; the default does nothing. `epochs_done` is
/// the number of completed epochs (1-based after the first epoch).
pub trait EpochObserver {
    fn on_epoch_end(
        &mut self,
        epochs_done: usize,
        model: &TinyFpn,
        adam: &AdamState,
        log: &TrainLog,
    ) -> Result<()> {
        let _ = (epochs_done, model, adam, log);
        Ok(())
    }
}

pub struct NoObserver;
impl EpochObserver for NoObserver {}

/// Final state of a run: everything needed to evaluate, resume or fine-tune.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TinyFpn,
    pub adam: Option<AdamState>,
    pub config: PretrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Head parameters absent from the file (stripped checkpoints).
    pub missing_heads: Vec<String>,
}

fn check_dataset_fit(ds: &Dataset, cfg: &PretrainConfig) -> Result<()> {
    if cfg.backbone.num_classes != ds.manifest.num_classes {
        return Err(Error::ConfigError(format!(
            "backbone has {} classes, dataset has {}",
            cfg.backbone.num_classes, ds.manifest.num_classes
        )));
    }
    if cfg.backbone.input_hw != ds.manifest.image_size {
        return Err(Error::ConfigError(format!(
            "backbone expects {}px input, dataset is {}px",
            cfg.backbone.input_hw, ds.manifest.image_size
        )));
    }
    if cfg.batch_size > ds.videos.len() {
        return Err(Error::ConfigError(format!(
            "batch_size {} exceeds {} videos",
            cfg.batch_size,
            ds.videos.len()
        )));
    }
    Ok(())
}

/// Pretrain from a fresh model.
pub fn pretrain(ds: &Dataset, cfg: &PretrainConfig) -> Result<(Checkpoint, TrainLog)> {
    pretrain_observed(ds, cfg, &mut NoObserver)
}

pub fn pretrain_observed(
    ds: &Dataset,
    cfg: &PretrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    check_dataset_fit(ds, cfg)?;
    let mut model = TinyFpn::new(cfg.backbone, rng::derive(cfg.seed, "model-init"))?;
    let mut adam = AdamState::new();
    run_epochs(ds, cfg, &mut model, &mut adam, 0, observer)
}

/// Continue a checkpointed run to the configured epoch count. Produces the
/// same final state as the uninterrupted run, bit for bit.
pub fn resume(ds: &Dataset, from: Checkpoint, observer: &mut dyn EpochObserver) -> Result<(Checkpoint, TrainLog)> {
    let cfg = from.config;
    cfg.validate()?;
    check_dataset_fit(ds, &cfg)?;
    if from.epoch >= cfg.epochs {
        return Err(Error::ConfigError(format!(
            "checkpoint already has {} of {} epochs",
            from.epoch, cfg.epochs
        )));
    }
    if !from.missing_heads.is_empty() {
        return Err(Error::ConfigError(
            "cannot resume pretraining from a checkpoint with stripped heads".into(),
        ));
    }
    let mut model = from.model;
    let mut adam = from.adam.unwrap_or_default();
    run_epochs(ds, &cfg, &mut model, &mut adam, from.epoch, observer)
}

fn run_epochs(
    ds: &Dataset,
    cfg: &PretrainConfig,
    model: &mut TinyFpn,
    adam: &mut AdamState,
    start_epoch: usize,
    observer: &mut dyn EpochObserver,
) -> Result<(Checkpoint, TrainLog)> {
    let epoch_base = rng::derive(cfg.seed, "epochs");
    let steps_per_epoch = ds.videos.len() / cfg.batch_size;
    let mut log = TrainLog::default();
    let mut step = start_epoch * steps_per_epoch;
    for epoch in start_epoch..cfg.epochs {
        let epoch_seed = rng::derive_u64(epoch_base, epoch as u64);
        let batches = make_batches(ds, cfg.batch_size, epoch_seed, cfg.label_rate, &cfg.augment)?;
        for batch in &batches {
            let t0 = Instant::now();
            let losses = train_step(model, batch, adam, cfg)?;
            log.records.push(StepRecord {
                step,
                epoch,
                mode: cfg.mode,
                losses,
                seconds: t0.elapsed().as_secs_f64(),
            });
            step += 1;
        }
        observer.on_epoch_end(epoch + 1, model, adam, &log)?;
    }
    Ok((
        Checkpoint {
            model: model.clone(),
            adam: Some(adam.clone()),
            config: *cfg,
            epoch: cfg.epochs,
            missing_heads: Vec::new(),
        },
        log,
    ))
}

// ── checkpoint files ────────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"HICK";
const CKPT_VERSION: u32 = 1;

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    wire::put_u16(out, name.len() as u16);
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        wire::put_u32(out, d as u32);
    }
    for &v in data {
        wire::put_f64(out, v);
    }
}

fn split_seed(seed: u64) -> [f64; 2] {
    [(seed & 0xffff_ffff) as f64, (seed >> 32) as f64]
}

fn join_seed(halves: &[f64]) -> u64 {
    (halves[0] as u64) | ((halves[1] as u64) << 32)
}

fn meta_tensors(ckpt: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let cfg = &ckpt.config;
    let b = &cfg.backbone;
    let t = cfg.effective_toggles();
    let mode_index = match cfg.mode {
        TrainMode::Hico => 0.0,
        TrainMode::VanillaCl => 1.0,
        TrainMode::ScratchSupervised => 2.0,
    };
    let denom_index = match cfg.weights.smooth_denominator {
        SmoothDenominator::BatchMinusOne => 0.0,
        SmoothDenominator::ClassesMinusOne => 1.0,
    };
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    vec![
        ("meta.epoch".into(), vec![1], vec![ckpt.epoch as f64]),
        ("meta.mode".into(), vec![1], vec![mode_index]),
        (
            "meta.toggles".into(),
            vec![5],
            vec![flag(t.ll), flag(t.mm), flag(t.gg), flag(t.gl), flag(t.gm)],
        ),
        ("meta.seed".into(), vec![2], split_seed(cfg.seed).to_vec()),
        (
            "meta.hyper".into(),
            vec![11],
            vec![
                cfg.epochs as f64,
                cfg.batch_size as f64,
                cfg.lr,
                cfg.weight_decay,
                flag(cfg.decoupled_weight_decay),
                cfg.weights.tau,
                cfg.weights.lambda,
                cfg.weights.alpha,
                cfg.weights.beta,
                denom_index,
                cfg.label_rate,
            ],
        ),
        ("meta.label_schedule".into(), vec![1], vec![cfg.checkpoint_every as f64]),
        (
            "meta.backbone".into(),
            vec![12],
            vec![
                b.in_channels as f64,
                b.stem_channels as f64,
                b.stage_channels[0] as f64,
                b.stage_channels[1] as f64,
                b.stage_channels[2] as f64,
                b.stage_channels[3] as f64,
                b.fpn_channels as f64,
                b.embed_dim as f64,
                b.num_classes as f64,
                b.input_hw as f64,
                flag(b.stem_downsample),
                flag(b.head_relu),
            ],
        ),
        (
            "meta.augment".into(),
            vec![6],
            vec![
                cfg.augment.crop_scale.0,
                cfg.augment.crop_scale.1,
                cfg.augment.flip_prob,
                cfg.augment.brightness_jitter,
                cfg.augment.contrast_range.0,
                cfg.augment.contrast_range.1,
            ],
        ),
    ]
}

/// Serialize a checkpoint: magic, version, payload length, a flat list of
/// named tensors (parameters, BN running stats, optimizer moments, meta),
/// then a CRC32 over the payload.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut payload = Vec::new();
    let mut count = 0u32;
    let mut body = Vec::new();
    for p in ckpt.model.named_parameters() {
        put_tensor(&mut body, &p.name, p.value.shape().dims(), p.value.data());
        count += 1;
    }
    for (key, rs) in ckpt.model.running_stats() {
        put_tensor(&mut body, &format!("{key}.running_mean"), &[rs.mean.len()], &rs.mean);
        put_tensor(&mut body, &format!("{key}.running_var"), &[rs.var.len()], &rs.var);
        count += 2;
    }
    if let Some(adam) = &ckpt.adam {
        put_tensor(&mut body, "adam.t", &[1], &[adam.t as f64]);
        count += 1;
        for (name, m, v) in adam.moments() {
            put_tensor(&mut body, &format!("adam.m.{name}"), m.shape().dims(), m.data());
            put_tensor(&mut body, &format!("adam.v.{name}"), v.shape().dims(), v.data());
            count += 2;
        }
    }
    for (name, dims, data) in meta_tensors(ckpt) {
        put_tensor(&mut body, &name, &dims, &data);
        count += 1;
    }
    wire::put_u32(&mut payload, count);
    payload.extend_from_slice(&body);

    let mut out = Vec::with_capacity(payload.len() + 16);
    out.extend_from_slice(CKPT_MAGIC);
    wire::put_u32(&mut out, CKPT_VERSION);
    wire::put_u64(&mut out, payload.len() as u64);
    out.extend_from_slice(&payload);
    wire::put_u32(&mut out, wire::crc32(&payload));
    wire::atomic_write(path, &out)
}

fn read_tensor(r: &mut Reader) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::FormatError("tensor name is not UTF-8".into()))?;
    let rank = r.u8()? as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::FormatError(format!("tensor {name} has rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let numel: usize = dims.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(r.f64()?);
    }
    Ok((name, dims, data))
}

fn meta_vec<'a>(
    tensors: &'a BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    name: &str,
    len: usize,
) -> Result<&'a [f64]> {
    let (dims, data) = tensors
        .get(name)
        .ok_or_else(|| Error::FormatError(format!("checkpoint is missing {name}")))?;
    if dims != &[len] {
        return Err(Error::FormatError(format!("{name} has dims {dims:?}, expected [{len}]")));
    }
    Ok(data)
}

/// Load and verify a checkpoint. A checkpoint whose head parameters were
/// stripped loads fine; the absent names are reported in `missing_heads`.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::FormatError("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::FormatError(format!("unsupported checkpoint version {version}")));
    }
    let payload_len = r.u64()? as usize;
    let payload = r.take(payload_len)?;
    let stored_crc = r.u32()?;
    if r.remaining() != 0 {
        return Err(Error::FormatError(format!("{} trailing bytes after checksum", r.remaining())));
    }
    if wire::crc32(payload) != stored_crc {
        return Err(Error::CorruptFile("checkpoint checksum mismatch".into()));
    }

    let mut pr = Reader::new(payload);
    let count = pr.u32()?;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let (name, dims, data) = read_tensor(&mut pr)?;
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::FormatError(format!("checkpoint repeats tensor {name}")));
        }
    }
    if pr.remaining() != 0 {
        return Err(Error::FormatError(format!("{} unparsed payload bytes", pr.remaining())));
    }

    let bvec = meta_vec(&tensors, "meta.backbone", 12)?;
    let backbone = BackboneConfig {
        in_channels: bvec[0] as usize,
        stem_channels: bvec[1] as usize,
        stage_channels: [bvec[2] as usize, bvec[3] as usize, bvec[4] as usize, bvec[5] as usize],
        fpn_channels: bvec[6] as usize,
        embed_dim: bvec[7] as usize,
        num_classes: bvec[8] as usize,
        input_hw: bvec[9] as usize,
        stem_downsample: bvec[10] != 0.0,
        head_relu: bvec[11] != 0.0,
    };
    let hyper = meta_vec(&tensors, "meta.hyper", 11)?;
    let toggles_v = meta_vec(&tensors, "meta.toggles", 5)?;
    let augment_v = meta_vec(&tensors, "meta.augment", 6)?;
    let mode = match meta_vec(&tensors, "meta.mode", 1)?[0] as usize {
        0 => TrainMode::Hico,
        1 => TrainMode::VanillaCl,
        2 => TrainMode::ScratchSupervised,
        other => return Err(Error::FormatError(format!("unknown mode index {other}"))),
    };
    let smooth_denominator = match hyper[9] as usize {
        0 => SmoothDenominator::BatchMinusOne,
        1 => SmoothDenominator::ClassesMinusOne,
        other => return Err(Error::FormatError(format!("unknown denominator index {other}"))),
    };
    let config = PretrainConfig {
        epochs: hyper[0] as usize,
        batch_size: hyper[1] as usize,
        lr: hyper[2],
        weight_decay: hyper[3],
        decoupled_weight_decay: hyper[4] != 0.0,
        weights: LossWeights {
            tau: hyper[5],
            lambda: hyper[6],
            alpha: hyper[7],
            beta: hyper[8],
            smooth_denominator,
        },
        mode,
        toggles: TermToggles {
            ll: toggles_v[0] != 0.0,
            mm: toggles_v[1] != 0.0,
            gg: toggles_v[2] != 0.0,
            gl: toggles_v[3] != 0.0,
            gm: toggles_v[4] != 0.0,
        },
        label_rate: hyper[10],
        seed: join_seed(meta_vec(&tensors, "meta.seed", 2)?),
        augment: AugmentConfig {
            crop_scale: (augment_v[0], augment_v[1]),
            flip_prob: augment_v[2],
            brightness_jitter: augment_v[3],
            contrast_range: (augment_v[4], augment_v[5]),
        },
        backbone,
        checkpoint_every: meta_vec(&tensors, "meta.label_schedule", 1)?[0] as usize,
    };
    let epoch = meta_vec(&tensors, "meta.epoch", 1)?[0] as usize;

    let mut params = BTreeMap::new();
    let mut running = BTreeMap::new();
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    let mut adam_t = None;
    for (name, (dims, data)) in &tensors {
        if name.starts_with("meta.") {
            continue;
        }
        let tensor = || -> Result<Tensor> { Tensor::from_vec(Shape::new(dims)?, data.clone()) };
        if name == "adam.t" {
            adam_t = Some(data[0] as u64);
        } else if let Some(p) = name.strip_prefix("adam.m.") {
            adam_m.insert(p.to_string(), tensor()?);
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            adam_v.insert(p.to_string(), tensor()?);
        } else if let Some(key) = name.strip_suffix(".running_mean") {
            running
                .entry(key.to_string())
                .or_insert_with(|| RunningStats::new(data.len()))
                .mean = data.clone();
        } else if let Some(key) = name.strip_suffix(".running_var") {
            running
                .entry(key.to_string())
                .or_insert_with(|| RunningStats::new(data.len()))
                .var = data.clone();
        } else {
            params.insert(name.clone(), tensor()?);
        }
    }
    let missing_heads: Vec<String> = param_specs(&backbone)
        .iter()
        .filter(|(name, _, _)| is_task_head(name) && !params.contains_key(name))
        .map(|(name, _, _)| name.clone())
        .collect();
    let model = TinyFpn::from_parts(backbone, params, running)?;
    let adam = match adam_t {
        Some(t) => Some(AdamState::from_parts(adam_m, adam_v, t)?),
        None => {
            if !adam_m.is_empty() || !adam_v.is_empty() {
                return Err(Error::FormatError("optimizer moments present without adam.t".into()));
            }
            None
        }
    };
    Ok(Checkpoint { model, adam, config, epoch, missing_heads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Init;

    fn one_param_model() -> TinyFpn {
        TinyFpn::new(tiny_backbone(), 7).unwrap()
    }

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            stem_channels: 4,
            stage_channels: [4, 4, 4, 4],
            fpn_channels: 4,
            embed_dim: 4,
            num_classes: 3,
            input_hw: 16,
            stem_downsample: false,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_zero_decay_is_a_fixed_point() {
        let mut model = one_param_model();
        let before: Vec<Vec<f64>> = model.params().map(|(_, t)| t.data().to_vec()).collect();
        let mut grads = BTreeMap::new();
        for (name, t) in model.params() {
            grads.insert(name.to_string(), Tensor::zeros(t.shape().dims()).unwrap());
        }
        let mut state = AdamState::new();
        adam_step(&mut model, &grads, &mut state, 3e-4, 0.0, false).unwrap();
        let after: Vec<Vec<f64>> = model.params().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_toward_sign() {
        let mut model = one_param_model();
        let name = "classifier.b".to_string();
        let before = model.param(&name).unwrap().data().to_vec();
        let dims = model.param(&name).unwrap().shape().dims().to_vec();
        let g = Tensor::from_vec(Shape::new(&dims).unwrap(), vec![0.37; before.len()]).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert(name.clone(), g);
        let mut state = AdamState::new();
        let lr = 1e-2;
        adam_step(&mut model, &grads, &mut state, lr, 0.0, false).unwrap();
        for (b, a) in before.iter().zip(model.param(&name).unwrap().data()) {
            let delta = b - a;
            // First step: m_hat/sqrt(v_hat) = g/|g| up to eps, so the move is lr.
            assert!((delta - lr).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn adam_is_deterministic_over_ten_steps() {
        let run = || {
            let mut model = one_param_model();
            let mut state = AdamState::new();
            for step in 0..10 {
                let mut grads = BTreeMap::new();
                for (name, t) in model.params() {
                    let data: Vec<f64> = t
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, v)| 0.01 * v + 0.001 * ((i + step) as f64))
                        .collect();
                    grads.insert(name.to_string(), Tensor::from_vec(t.shape().clone(), data).unwrap());
                }
                adam_step(&mut model, &grads, &mut state, 3e-4, 1e-4, false).unwrap();
            }
            model
        };
        let (a, b) = (run(), run());
        for ((na, ta), (_, tb)) in a.params().zip(b.params()) {
            assert_eq!(ta.data(), tb.data(), "{na}");
        }
    }

    #[test]
    fn weight_decay_alone_shrinks_parameters() {
        for decoupled in [false, true] {
            let mut model = one_param_model();
            let name = "heads.global.w";
            let before = model.param(name).unwrap().data().to_vec();
            let mut grads = BTreeMap::new();
            grads.insert(
                name.to_string(),
                Tensor::zeros(model.param(name).unwrap().shape().dims()).unwrap(),
            );
            let mut state = AdamState::new();
            adam_step(&mut model, &grads, &mut state, 1e-3, 1e-2, decoupled).unwrap();
            let after = model.param(name).unwrap().data();
            for (b, a) in before.iter().zip(after) {
                if b.abs() > 1e-9 {
                    assert!(a.abs() < b.abs(), "decoupled={decoupled}: |{a}| !< |{b}|");
                }
            }
        }
    }

    #[test]
    fn adam_rejects_nonfinite_gradients_by_name() {
        let mut model = one_param_model();
        let mut grads = BTreeMap::new();
        let dims = model.param("classifier.b").unwrap().shape().dims().to_vec();
        let mut bad = vec![0.0; dims.iter().product()];
        bad[0] = f64::NAN;
        grads.insert(
            "classifier.b".to_string(),
            Tensor::from_vec(Shape::new(&dims).unwrap(), vec![0.0; bad.len()]).unwrap(),
        );
        // from_vec rejects NaN, so poke it in after construction.
        grads.get_mut("classifier.b").unwrap().data_mut()[0] = f64::NAN;
        let mut state = AdamState::new();
        let err = adam_step(&mut model, &grads, &mut state, 1e-3, 0.0, false).unwrap_err();
        match err {
            Error::NumericalFailure(msg) => assert!(msg.contains("classifier.b"), "{msg}"),
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let ok = PretrainConfig { backbone: tiny_backbone(), ..PretrainConfig::default() };
        ok.validate().unwrap();
        let bad = PretrainConfig { epochs: 0, ..ok };
        assert!(bad.validate().is_err());
        let bad = PretrainConfig { batch_size: 1, ..ok };
        assert!(bad.validate().is_err());
        let fine = PretrainConfig { batch_size: 1, mode: TrainMode::ScratchSupervised, ..ok };
        fine.validate().unwrap();
        let bad = PretrainConfig { lr: 0.0, ..ok };
        assert!(bad.validate().is_err());
        let bad = PretrainConfig { label_rate: 1.5, ..ok };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mode_strings_round_trip() {
        for mode in [TrainMode::Hico, TrainMode::VanillaCl, TrainMode::ScratchSupervised] {
            assert_eq!(TrainMode::parse(mode.as_str()).unwrap(), mode);
        }
        assert!(TrainMode::parse("sgd").is_err());
        assert_eq!(TermToggles::parse("gg+gl").unwrap().label(), "gg+gl");
        assert_eq!(TermToggles::parse("none").unwrap(), TermToggles::none());
        assert!(TermToggles::parse("xx").is_err());
        assert_eq!(TermToggles::all_on().label(), "ll+mm+gg+gl+gm");
    }

    #[test]
    fn effective_knobs_follow_the_mode() {
        let cfg = PretrainConfig { backbone: tiny_backbone(), ..PretrainConfig::default() };
        assert_eq!(cfg.effective_toggles(), TermToggles::all_on());
        assert_eq!(cfg.effective_beta(), 0.2);
        let v = PretrainConfig { mode: TrainMode::VanillaCl, ..cfg };
        assert_eq!(v.effective_toggles(), TermToggles::only_gg());
        let s = PretrainConfig { mode: TrainMode::ScratchSupervised, ..cfg };
        assert_eq!(s.effective_toggles(), TermToggles::none());
        assert_eq!(s.effective_beta(), 1.0);
        // Batch-derived softening denominator uses the configured size.
        assert_eq!(cfg.smooth_denominator_value(), 8);
        let c = PretrainConfig {
            weights: LossWeights {
                smooth_denominator: SmoothDenominator::ClassesMinusOne,
                ..LossWeights::default()
            },
            ..cfg
        };
        assert_eq!(c.smooth_denominator_value(), 3);
    }

    #[test]
    fn seed_halves_round_trip() {
        for seed in [0u64, 1, u64::MAX, 0xdead_beef_cafe_f00d] {
            assert_eq!(join_seed(&split_seed(seed)), seed);
        }
    }

    #[test]
    fn adam_state_from_parts_rejects_mismatched_maps() {
        let t = Tensor::create(&[2], Init::Ones).unwrap();
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), t.clone());
        let v = BTreeMap::new();
        assert!(AdamState::from_parts(m, v, 1).is_err());
    }
}
