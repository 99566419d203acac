//! Downstream protocol: fine-tuning a pretrained backbone on frames as
//! images, classification metrics, k-fold cross-validation by video,
//! convergence comparisons across pretraining modes, ablation grids, and
//! batch-size / label-rate sweeps.
//!
//! Fine-tuning always attaches a fresh linear head on the pooled coarsest
//! pyramid map; the pretraining heads and classifier play no role
//! downstream. Plain hard-label CE (no softening) with SGD.

use std::collections::BTreeMap;

use crate::autodiff::{Init, Phase, Shape, Tape, Tensor};
use crate::data::Dataset;
use crate::encoder::{in_last3_scope, BackboneConfig, TinyFpn};
use crate::losses;
use crate::rng::{self, Rng};
use crate::trainer::{pretrain, PretrainConfig, TermToggles, TrainMode};
use crate::{Error, Result};

// ── configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableScope {
    /// Whole backbone plus the downstream head.
    Full,
    /// Final backbone stage, the pyramid smoothing convs, and the head.
    LastThree,
    /// Downstream head only.
    LinearProbe,
}

impl TrainableScope {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainableScope::Full => "full",
            TrainableScope::LastThree => "last3",
            TrainableScope::LinearProbe => "linear_probe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainableScope::Full),
            "last3" => Ok(TrainableScope::LastThree),
            "linear_probe" => Ok(TrainableScope::LinearProbe),
            other => Err(Error::ConfigError(format!(
                "unknown scope {other}, expected full | last3 | linear_probe"
            ))),
        }
    }

    /// Whether a backbone parameter is trainable under this scope. The
    /// downstream head is trainable under every scope.
    pub fn backbone_trainable(self, name: &str) -> bool {
        match self {
            TrainableScope::Full => true,
            TrainableScope::LastThree => in_last3_scope(name),
            TrainableScope::LinearProbe => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub scope: TrainableScope,
    pub folds: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads for independent fold / sweep runs. Results are
    /// identical for any value; 1 runs everything on the calling thread.
    pub threads: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-2,
            weight_decay: 1e-4,
            epochs: 30,
            scope: TrainableScope::LastThree,
            folds: 5,
            batch_size: 8,
            seed: 0,
            threads: 1,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::ConfigError(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::ConfigError(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::ConfigError("epochs must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::ConfigError(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.batch_size == 0 {
            return Err(Error::ConfigError("batch_size must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::ConfigError("threads must be positive".into()));
        }
        Ok(())
    }
}

// ── metrics ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// confusion[true_class][predicted_class].
    pub confusion: Vec<Vec<usize>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Classes whose precision or recall had a zero denominator (reported
    /// as zero above).
    pub degenerate_classes: Vec<usize>,
    pub fold: usize,
    pub seed: u64,
}

/// Confusion-matrix metrics. Per-class precision and recall fall back to
/// zero on an empty denominator, with the class listed as degenerate.
pub fn compute_metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::InvalidShape(format!(
                "class out of range: prediction {p}, label {y}, {num_classes} classes"
            )));
        }
        confusion[y][p] += 1;
    }
    let total: usize = predictions.len();
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut precision = vec![0.0; num_classes];
    let mut recall = vec![0.0; num_classes];
    let mut degenerate = Vec::new();
    let mut f1_sum = 0.0;
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let col: usize = (0..num_classes).map(|r| confusion[r][c]).sum();
        let row: usize = confusion[c].iter().sum();
        let mut bad = false;
        if col > 0 {
            precision[c] = tp as f64 / col as f64;
        } else {
            bad = true;
        }
        if row > 0 {
            recall[c] = tp as f64 / row as f64;
        } else {
            bad = true;
        }
        if bad {
            degenerate.push(c);
        }
        if precision[c] + recall[c] > 0.0 {
            f1_sum += 2.0 * precision[c] * recall[c] / (precision[c] + recall[c]);
        }
    }
    Ok(MetricsReport {
        confusion,
        precision,
        recall,
        accuracy: correct as f64 / total as f64,
        macro_f1: f1_sum / num_classes as f64,
        degenerate_classes: degenerate,
        fold: 0,
        seed: 0,
    })
}

// ── fold splits ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
}

/// Deterministic by-video fold assignment: ids shuffled by the seed, then
/// dealt round-robin into test folds. Test sets partition the video set and
/// differ in size by at most one.
pub fn fold_splits(ds: &Dataset, folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(Error::ConfigError(format!("need at least 2 folds, got {folds}")));
    }
    if ds.videos.len() < folds {
        return Err(Error::ConfigError(format!(
            "{} videos cannot fill {folds} folds",
            ds.videos.len()
        )));
    }
    let mut ids: Vec<u32> = ds.videos.iter().map(|v| v.video_id).collect();
    let mut rng = Rng::new(rng::derive(seed, "folds"));
    rng.shuffle(&mut ids);
    let mut splits = Vec::with_capacity(folds);
    for k in 0..folds {
        let test_ids: Vec<u32> = ids.iter().copied().skip(k).step_by(folds).collect();
        let train_ids: Vec<u32> = ids
            .iter()
            .copied()
            .enumerate()
            .filter(|(i, _)| i % folds != k)
            .map(|(_, id)| id)
            .collect();
        splits.push(FoldSplit { train_ids, test_ids });
    }
    Ok(splits)
}

// ── fine-tuning ─────────────────────────────────────────────────────────────

/// Backbone plus a fresh linear head on the pooled coarsest pyramid map.
#[derive(Debug, Clone)]
pub struct FinetuneModel {
    pub backbone: TinyFpn,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub num_classes: usize,
}

impl FinetuneModel {
    /// Wrap a pretrained backbone (task heads are dropped) and initialize
    /// the downstream head for `num_classes`.
    pub fn new(mut backbone: TinyFpn, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::ConfigError(format!("need at least 2 classes, got {num_classes}")));
        }
        backbone.discard_task_heads();
        let fpn = backbone.cfg().fpn_channels;
        Ok(FinetuneModel {
            backbone,
            fc_w: Tensor::create(&[fpn, num_classes], Init::Kaiming { seed: rng::derive(seed, "fc.w") })?,
            fc_b: Tensor::zeros(&[num_classes])?,
            num_classes,
        })
    }

    /// Forward a frame batch to logits. `scope` controls which backbone
    /// leaves require gradients; the head always does. Returns the logits
    /// id plus the name-to-id map of trainable tensors.
    fn forward(
        &mut self,
        tape: &mut Tape,
        frames: Tensor,
        phase: Phase,
        scope: TrainableScope,
    ) -> Result<(crate::autodiff::TapeId, BTreeMap<String, crate::autodiff::TapeId>)> {
        let binding = self.backbone.bind(tape, |name| scope.backbone_trainable(name));
        let input = tape.leaf(frames, false);
        let c = self.backbone.backbone_forward(tape, &binding, input, phase)?;
        let p = self.backbone.fpn_forward(tape, &binding, c, phase)?;
        let pooled = tape.global_avg_pool(p[3])?;
        let w = tape.leaf(self.fc_w.clone(), true);
        let b = tape.leaf(self.fc_b.clone(), true);
        let logits = tape.linear(pooled, w, b)?;
        let mut trainable: BTreeMap<String, crate::autodiff::TapeId> = binding
            .iter()
            .filter(|(name, _)| scope.backbone_trainable(name))
            .map(|(name, id)| (name.to_string(), id))
            .collect();
        trainable.insert("fc.w".into(), w);
        trainable.insert("fc.b".into(), b);
        Ok((logits, trainable))
    }

    /// Argmax class per frame, evaluated with running statistics.
    pub fn predict(&mut self, frames: Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward(&mut tape, frames, Phase::Eval, TrainableScope::LinearProbe)?;
        let t = tape.value(logits);
        let (n, c) = t.shape().as_2d()?;
        let mut out = Vec::with_capacity(n);
        for row in t.data().chunks_exact(c) {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .expect("at least one class")
                .0;
            out.push(best);
        }
        Ok(out)
    }

    fn apply_sgd(&mut self, name: &str, grad: &[f64], lr: f64, wd: f64) -> Result<()> {
        let param = match name {
            "fc.w" => self.fc_w.data_mut(),
            "fc.b" => self.fc_b.data_mut(),
            other => self
                .backbone
                .param_mut(other)
                .ok_or_else(|| Error::ShapeMismatch(format!("gradient for unknown parameter {other}")))?
                .data_mut(),
        };
        if param.len() != grad.len() {
            return Err(Error::ShapeMismatch(format!("gradient length mismatch for {name}")));
        }
        for (p, &g) in param.iter_mut().zip(grad) {
            if !g.is_finite() {
                return Err(Error::NumericalFailure(format!("non-finite gradient for {name}")));
            }
            *p -= lr * (g + wd * *p);
        }
        Ok(())
    }
}

/// All (frame tensor data, label) pairs of the given videos, flattened.
fn frame_table(ds: &Dataset, ids: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for id in ids {
        let video = ds
            .videos
            .iter()
            .find(|v| v.video_id == *id)
            .ok_or_else(|| Error::ConfigError(format!("video {id} not in dataset")))?;
        let dims = video.frames.shape().dims();
        let plane = dims[1] * dims[2] * dims[3];
        for t in 0..dims[0] {
            frames.push(video.frames.data()[t * plane..(t + 1) * plane].to_vec());
            labels.push(video.class_id as usize);
        }
    }
    Ok((frames, labels))
}

fn stack_frames(cfg: &BackboneConfig, rows: &[&Vec<f64>]) -> Result<Tensor> {
    let (c, s) = (cfg.in_channels, cfg.input_hw);
    let shape = Shape::new(&[rows.len(), c, s, s])?;
    let mut data = Vec::with_capacity(shape.numel());
    for row in rows {
        if row.len() != c * s * s {
            return Err(Error::ShapeMismatch(format!(
                "frame has {} values, backbone expects {}",
                row.len(),
                c * s * s
            )));
        }
        data.extend_from_slice(row);
    }
    Tensor::from_vec(shape, data)
}

/// Per-frame accuracy of `model` on the given videos.
pub fn evaluate_accuracy(model: &mut FinetuneModel, ds: &Dataset, ids: &[u32], batch: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (frames, labels) = frame_table(ds, ids)?;
    let mut preds = Vec::with_capacity(frames.len());
    let cfg = *model.backbone.cfg();
    for chunk in frames.chunks(batch.max(1)) {
        let refs: Vec<&Vec<f64>> = chunk.iter().collect();
        let input = stack_frames(&cfg, &refs)?;
        preds.extend(model.predict(input)?);
    }
    Ok((preds, labels))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: FinetuneModel,
    pub report: MetricsReport,
    /// Held-out accuracy before training (index 0) and after each epoch.
    pub epoch_accuracy: Vec<f64>,
}

/// Fine-tune a pretrained backbone on the train videos and evaluate per
/// frame on the test videos. Hard-label CE, SGD with L2, frames treated as
/// independent images.
pub fn finetune(
    pretrained: &TinyFpn,
    ds: &Dataset,
    train_ids: &[u32],
    test_ids: &[u32],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let bb = pretrained.cfg();
    if bb.input_hw != ds.manifest.image_size {
        return Err(Error::ConfigError(format!(
            "backbone expects {}px input, dataset is {}px",
            bb.input_hw, ds.manifest.image_size
        )));
    }
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(Error::ConfigError("fine-tuning needs nonempty train and test video sets".into()));
    }
    let num_classes = ds.manifest.num_classes;
    let mut model = FinetuneModel::new(pretrained.clone(), num_classes, rng::derive(cfg.seed, "head-init"))?;
    let (train_frames, train_labels) = frame_table(ds, train_ids)?;
    let backbone_cfg = *model.backbone.cfg();

    let mut epoch_accuracy = Vec::with_capacity(cfg.epochs + 1);
    let (mut preds, mut labels) = evaluate_accuracy(&mut model, ds, test_ids, cfg.batch_size)?;
    epoch_accuracy.push(compute_metrics(&preds, &labels, num_classes)?.accuracy);

    let shuffle_base = rng::derive(cfg.seed, "finetune-epochs");
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_frames.len()).collect();
        Rng::new(rng::derive_u64(shuffle_base, epoch as u64)).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Vec<f64>> = chunk.iter().map(|&i| &train_frames[i]).collect();
            let input = stack_frames(&backbone_cfg, &refs)?;
            let class_ids: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();

            let mut tape = Tape::new();
            let (logits, trainable) = model.forward(&mut tape, input, Phase::Train, cfg.scope)?;
            let targets = losses::soften_labels(&class_ids, num_classes, 0.0, num_classes.max(2))?;
            let w = 1.0 / chunk.len() as f64;
            let loss = tape.soft_ce_sum(logits, &targets, vec![w; chunk.len()])?;
            tape.backward(loss)?;
            let grads: Vec<(String, Tensor)> = trainable
                .iter()
                .map(|(name, id)| Ok((name.clone(), tape.grad_or_zeros(*id)?)))
                .collect::<Result<_>>()?;
            for (name, grad) in &grads {
                model.apply_sgd(name, grad.data(), cfg.lr, cfg.weight_decay)?;
            }
        }
        (preds, labels) = evaluate_accuracy(&mut model, ds, test_ids, cfg.batch_size)?;
        epoch_accuracy.push(compute_metrics(&preds, &labels, num_classes)?.accuracy);
    }

    let mut report = compute_metrics(&preds, &labels, num_classes)?;
    report.seed = cfg.seed;
    Ok(FinetuneOutcome { model, report, epoch_accuracy })
}

// ── parallel fan-out ────────────────────────────────────────────────────────

/// Run `count` independent jobs on up to `threads` workers. Job i's result
/// lands in slot i, so the output is identical for any thread count.
pub fn run_jobs<T, F>(count: usize, threads: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = threads.max(1).min(count.max(1));
    if workers <= 1 {
        return (0..count).map(|i| job(i)).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = Vec::with_capacity(count);
    slots.resize_with(count, || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let job = &job;
            handles.push(scope.spawn(move || {
                let mut mine = Vec::new();
                let mut i = w;
                while i < count {
                    mine.push((i, job(i)));
                    i += workers;
                }
                mine
            }));
        }
        for handle in handles {
            for (i, r) in handle.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

// ── cross-validation ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CrossValReport {
    pub folds: Vec<MetricsReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// K-fold cross-validation of fine-tuning: each fold trains on its train
/// videos with a fold-derived seed and reports held-out metrics.
pub fn cross_validate(pretrained: &TinyFpn, ds: &Dataset, cfg: &FinetuneConfig) -> Result<CrossValReport> {
    cfg.validate()?;
    let splits = fold_splits(ds, cfg.folds, cfg.seed)?;
    let fold_base = rng::derive(cfg.seed, "fold-seeds");
    let reports = run_jobs(splits.len(), cfg.threads, |k| {
        let fold_cfg = FinetuneConfig { seed: rng::derive_u64(fold_base, k as u64), ..*cfg };
        let outcome = finetune(pretrained, ds, &splits[k].train_ids, &splits[k].test_ids, &fold_cfg)?;
        let mut report = outcome.report;
        report.fold = k;
        Ok(report)
    })?;
    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let f1s: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let (mean_macro_f1, std_macro_f1) = mean_std(&f1s);
    Ok(CrossValReport { folds: reports, mean_accuracy, std_accuracy, mean_macro_f1, std_macro_f1 })
}

// ── comparisons across pretraining modes ────────────────────────────────────

/// How the backbone is initialized before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainKind {
    /// Random initialization, no pretraining at all.
    Scratch,
    Hico,
    VanillaCl,
    ScratchSupervised,
}

impl PretrainKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PretrainKind::Scratch => "scratch",
            PretrainKind::Hico => "hico",
            PretrainKind::VanillaCl => "vanilla_cl",
            PretrainKind::ScratchSupervised => "scratch_supervised",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(PretrainKind::Scratch),
            "hico" => Ok(PretrainKind::Hico),
            "vanilla_cl" => Ok(PretrainKind::VanillaCl),
            "scratch_supervised" => Ok(PretrainKind::ScratchSupervised),
            other => Err(Error::ConfigError(format!(
                "unknown pretrain kind {other}, expected scratch | hico | vanilla_cl | scratch_supervised"
            ))),
        }
    }
}

/// Produce the backbone a fine-tune run starts from: either a fresh random
/// model or the result of pretraining in the given mode.
pub fn prepare_backbone(kind: PretrainKind, pre_ds: &Dataset, pre_cfg: &PretrainConfig) -> Result<TinyFpn> {
    match kind {
        PretrainKind::Scratch => {
            TinyFpn::new(pre_cfg.backbone, rng::derive(pre_cfg.seed, "model-init"))
        }
        kind => {
            let mode = match kind {
                PretrainKind::Hico => TrainMode::Hico,
                PretrainKind::VanillaCl => TrainMode::VanillaCl,
                PretrainKind::ScratchSupervised => TrainMode::ScratchSupervised,
                PretrainKind::Scratch => unreachable!(),
            };
            let cfg = PretrainConfig { mode, ..*pre_cfg };
            let (ckpt, _) = pretrain(pre_ds, &cfg)?;
            Ok(ckpt.model)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub kind: PretrainKind,
    pub epoch: usize,
    pub accuracy: f64,
}

/// Fine-tune from each initialization on the same downstream fold and
/// record held-out accuracy per epoch (epoch 0 = before training).
pub fn convergence_compare(
    kinds: &[PretrainKind],
    pre_ds: &Dataset,
    down_ds: &Dataset,
    pre_cfg: &PretrainConfig,
    fine_cfg: &FinetuneConfig,
) -> Result<Vec<ConvergenceRow>> {
    if kinds.is_empty() {
        return Err(Error::ConfigError("convergence comparison needs at least one mode".into()));
    }
    let split = fold_splits(down_ds, fine_cfg.folds, fine_cfg.seed)?.remove(0);
    let per_kind = run_jobs(kinds.len(), fine_cfg.threads, |i| {
        let backbone = prepare_backbone(kinds[i], pre_ds, pre_cfg)?;
        let outcome = finetune(&backbone, down_ds, &split.train_ids, &split.test_ids, fine_cfg)?;
        Ok(outcome.epoch_accuracy)
    })?;
    let mut rows = Vec::new();
    for (kind, accs) in kinds.iter().zip(per_kind) {
        for (epoch, acc) in accs.iter().enumerate() {
            rows.push(ConvergenceRow { kind: *kind, epoch, accuracy: *acc });
        }
    }
    Ok(rows)
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut s = String::from("mode,epoch,accuracy\n");
    for r in rows {
        s.push_str(&format!("{},{},{:?}\n", r.kind.as_str(), r.epoch, r.accuracy));
    }
    s
}

// ── ablations ───────────────────────────────────────────────────────────────

/// One ablation row: which contrastive terms are on, and whether the
/// softened classification part is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationSpec {
    pub toggles: TermToggles,
    pub soften: bool,
}

impl AblationSpec {
    pub fn label(&self) -> String {
        let base = self.toggles.label();
        match (base.as_str(), self.soften) {
            ("none", true) => "soften".into(),
            ("none", false) => "none".into(),
            (_, true) => format!("{base}+soften"),
            (_, false) => base,
        }
    }

    fn enabled_anything(&self) -> bool {
        let t = self.toggles;
        t.ll || t.mm || t.gg || t.gl || t.gm || self.soften
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub cv: CrossValReport,
}

/// Pretrain once per toggle set and cross-validate the fine-tune. A row
/// with the softening off pretrains with beta = 0.
pub fn run_ablation(
    specs: &[AblationSpec],
    pre_ds: &Dataset,
    down_ds: &Dataset,
    pre_cfg: &PretrainConfig,
    fine_cfg: &FinetuneConfig,
) -> Result<Vec<AblationRow>> {
    if specs.is_empty() {
        return Err(Error::ConfigError("ablation needs at least one row".into()));
    }
    for spec in specs {
        if !spec.enabled_anything() {
            return Err(Error::ConfigError("ablation row with every loss term disabled".into()));
        }
    }
    let rows = run_jobs(specs.len(), fine_cfg.threads, |i| {
        let spec = specs[i];
        let mut cfg = PretrainConfig { mode: TrainMode::Hico, toggles: spec.toggles, ..*pre_cfg };
        if !spec.soften {
            cfg.weights.beta = 0.0;
        }
        let backbone = prepare_backbone(
            if spec.toggles == TermToggles::none() { PretrainKind::ScratchSupervised } else { PretrainKind::Hico },
            pre_ds,
            &match spec.toggles == TermToggles::none() {
                true => PretrainConfig { mode: TrainMode::ScratchSupervised, ..cfg },
                false => cfg,
            },
        )?;
        let cv = cross_validate(&backbone, down_ds, fine_cfg)?;
        Ok(AblationRow { spec, cv })
    })?;
    Ok(rows)
}

// ── sweeps ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    BatchSize,
    LabelRate,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::LabelRate => "label_rate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "batch_size" => Ok(SweepAxis::BatchSize),
            "label_rate" => Ok(SweepAxis::LabelRate),
            other => Err(Error::ConfigError(format!(
                "unknown sweep axis {other}, expected batch_size | label_rate"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub cv: CrossValReport,
}

/// One pretrain + cross-validated fine-tune per axis value, all else fixed.
pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    pre_ds: &Dataset,
    down_ds: &Dataset,
    pre_cfg: &PretrainConfig,
    fine_cfg: &FinetuneConfig,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::ConfigError("sweep needs at least one value".into()));
    }
    for &v in values {
        match axis {
            SweepAxis::BatchSize => {
                if v < 2.0 || v.fract() != 0.0 {
                    return Err(Error::ConfigError(format!("batch_size sweep value {v} is not an integer >= 2")));
                }
            }
            SweepAxis::LabelRate => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::ConfigError(format!("label_rate sweep value {v} outside [0, 1]")));
                }
            }
        }
    }
    let rows = run_jobs(values.len(), fine_cfg.threads, |i| {
        let mut cfg = *pre_cfg;
        match axis {
            SweepAxis::BatchSize => cfg.batch_size = values[i] as usize,
            SweepAxis::LabelRate => cfg.label_rate = values[i],
        }
        let (ckpt, _) = pretrain(pre_ds, &cfg)?;
        let cv = cross_validate(&ckpt.model, down_ds, fine_cfg)?;
        Ok(SweepRow { axis, value: values[i], cv })
    })?;
    Ok(rows)
}

// ── machine-readable output ─────────────────────────────────────────────────

/// One line of the metrics CSV.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub run_id: String,
    pub mode: String,
    pub toggles: String,
    pub epoch: usize,
    pub report: MetricsReport,
}

/// CSV with per-class precision/recall columns for `num_classes` classes.
pub fn metrics_csv(rows: &[MetricsRow], num_classes: usize) -> String {
    let mut s = String::from("run_id,mode,toggles,fold,seed,epoch,accuracy,macro_f1");
    for c in 0..num_classes {
        s.push_str(&format!(",precision_c{c}"));
    }
    for c in 0..num_classes {
        s.push_str(&format!(",recall_c{c}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{:?},{:?}",
            r.run_id, r.mode, r.toggles, r.report.fold, r.report.seed, r.epoch, r.report.accuracy, r.report.macro_f1
        ));
        for c in 0..num_classes {
            s.push_str(&format!(",{:?}", r.report.precision.get(c).copied().unwrap_or(0.0)));
        }
        for c in 0..num_classes {
            s.push_str(&format!(",{:?}", r.report.recall.get(c).copied().unwrap_or(0.0)));
        }
        s.push('\n');
    }
    s
}

/// Mean-and-spread summary lines, one JSON object per configuration.
pub fn summary_text(entries: &[(String, CrossValReport)]) -> String {
    let mut s = String::new();
    for (name, cv) in entries {
        s.push_str(&format!(
            "{{\"config\": \"{}\", \"folds\": {}, \"accuracy_mean\": {:?}, \"accuracy_std\": {:?}, \"macro_f1_mean\": {:?}, \"macro_f1_std\": {:?}}}\n",
            name,
            cv.folds.len(),
            cv.mean_accuracy,
            cv.std_accuracy,
            cv.mean_macro_f1,
            cv.std_macro_f1
        ));
    }
    s
}
