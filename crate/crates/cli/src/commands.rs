//! One function per subcommand. Each resolves its configuration, runs the
//! corresponding library pipeline, writes outputs atomically into the
//! output directory, and persists the resolved config beside them.

use std::path::{Path, PathBuf};

use hico_core::data::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetManifest};
use hico_core::encoder::TinyFpn;
use hico_core::eval::{
    self, compute_metrics, cross_validate, finetune, fold_splits, metrics_csv, prepare_backbone,
    run_jobs, summary_text, AblationSpec, CrossValReport, MetricsRow, PretrainKind, SweepAxis,
};
use hico_core::rng;
use hico_core::trainer::{
    load_checkpoint, pretrain_observed, resume, save_checkpoint, AdamState, Checkpoint,
    EpochObserver, PretrainConfig, TermToggles, TrainLog,
};
use hico_core::{wire, Error, Result};

use crate::checks;
use crate::config::RunConfig;

fn write_text(path: &Path, text: &str) -> Result<()> {
    wire::atomic_write(path, text.as_bytes())
}

// ── gen-data ────────────────────────────────────────────────────────────────

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let ds = generate_dataset(&cfg.manifest)?;
    let path = cfg.out.join("train.hico");
    write_dataset(&ds, &path)?;
    cfg.persist()?;
    println!(
        "wrote {} videos, {} classes, {} frames each at {}px to {}",
        ds.videos.len(),
        ds.manifest.num_classes,
        ds.manifest.frames_per_video,
        ds.manifest.image_size,
        path.display()
    );
    Ok(())
}

// ── pretrain ────────────────────────────────────────────────────────────────

/// Writes model.ep{k}.hick after every k-th epoch (final epoch excluded;
/// the final state is model.hick).
struct PeriodicCheckpoints {
    cfg: PretrainConfig,
    out: PathBuf,
}

impl EpochObserver for PeriodicCheckpoints {
    fn on_epoch_end(
        &mut self,
        epochs_done: usize,
        model: &TinyFpn,
        adam: &AdamState,
        _log: &TrainLog,
    ) -> Result<()> {
        let every = self.cfg.checkpoint_every;
        if every > 0 && epochs_done % every == 0 && epochs_done < self.cfg.epochs {
            let ckpt = Checkpoint {
                model: model.clone(),
                adam: Some(adam.clone()),
                config: self.cfg,
                epoch: epochs_done,
                missing_heads: Vec::new(),
            };
            save_checkpoint(&self.out.join(format!("model.ep{epochs_done}.hick")), &ckpt)?;
        }
        Ok(())
    }
}

pub fn cmd_pretrain(cfg: &mut RunConfig, data: &Path, resume_from: Option<&Path>) -> Result<()> {
    let ds = read_dataset(data)?;
    cfg.align_to_dataset(&ds.manifest);

    let (ckpt, log) = match resume_from {
        Some(path) => {
            let from = load_checkpoint(path)?;
            // The stored config governs a resumed run end to end.
            cfg.pretrain = from.config;
            cfg.seed = from.config.seed;
            let mut obs = PeriodicCheckpoints { cfg: from.config, out: cfg.out.clone() };
            resume(&ds, from, &mut obs)?
        }
        None => {
            let mut obs = PeriodicCheckpoints { cfg: cfg.pretrain, out: cfg.out.clone() };
            pretrain_observed(&ds, &cfg.pretrain, &mut obs)?
        }
    };

    save_checkpoint(&cfg.out.join("model.hick"), &ckpt)?;
    write_text(&cfg.out.join("train.csv"), &log.to_csv())?;
    cfg.persist()?;
    let last = log.records.last().map(|r| r.losses.total).unwrap_or(f64::NAN);
    println!(
        "pretrained mode={} epochs={} steps={} final loss {:.6}",
        ckpt.config.mode.as_str(),
        ckpt.epoch,
        log.records.len(),
        last
    );
    Ok(())
}

// ── finetune ────────────────────────────────────────────────────────────────

pub fn cmd_finetune(cfg: &mut RunConfig, ckpt_path: &Path, data: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let ds = read_dataset(data)?;
    let cv = cross_validate(&ckpt.model, &ds, &cfg.finetune)?;

    let label = format!("{} {}", ckpt.config.mode.as_str(), cfg.finetune.scope.as_str());
    let rows: Vec<MetricsRow> = cv
        .folds
        .iter()
        .map(|report| MetricsRow {
            run_id: label.clone(),
            mode: ckpt.config.mode.as_str().into(),
            toggles: ckpt.config.toggles.label(),
            epoch: cfg.finetune.epochs,
            report: report.clone(),
        })
        .collect();
    write_text(&cfg.out.join("metrics.csv"), &metrics_csv(&rows, ds.manifest.num_classes))?;
    write_text(&cfg.out.join("summary.txt"), &summary_text(&[(label, cv.clone())]))?;
    cfg.persist()?;
    println!(
        "cross-validated {} folds: accuracy {:.4} +- {:.4}, macro F1 {:.4} +- {:.4}",
        cv.folds.len(),
        cv.mean_accuracy,
        cv.std_accuracy,
        cv.mean_macro_f1,
        cv.std_macro_f1
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────────

/// Per-frame classification with the checkpoint's own classifier head (no
/// training at all).
pub fn cmd_eval(cfg: &mut RunConfig, ckpt_path: &Path, data: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let ds = read_dataset(data)?;
    if !ckpt.model.has_task_heads() {
        return Err(Error::ConfigError(
            "checkpoint was saved without its classifier head; use finetune instead".into(),
        ));
    }
    let bb = ckpt.model.cfg();
    if bb.input_hw != ds.manifest.image_size {
        return Err(Error::ConfigError(format!(
            "checkpoint expects {}px input, dataset is {}px",
            bb.input_hw, ds.manifest.image_size
        )));
    }
    if bb.num_classes != ds.manifest.num_classes {
        return Err(Error::ConfigError(format!(
            "checkpoint has {} classes, dataset has {}",
            bb.num_classes, ds.manifest.num_classes
        )));
    }

    let mut model = ckpt.model.clone();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for video in &ds.videos {
        // one batch per video: frames are already stacked [T, 1, S, S]
        let mut tape = hico_core::autodiff::Tape::new();
        let binding = model.bind(&mut tape, |_| false);
        let out = model.forward_view(&mut tape, &binding, video.frames.clone(), hico_core::autodiff::Phase::Eval)?;
        let logits = tape.value(out.logits);
        let (_, c) = logits.shape().as_2d()?;
        for row in logits.data().chunks_exact(c) {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .expect("at least one class")
                .0;
            preds.push(best);
            labels.push(video.class_id as usize);
        }
    }
    let report = compute_metrics(&preds, &labels, ds.manifest.num_classes)?;

    let rows = vec![MetricsRow {
        run_id: "eval".into(),
        mode: ckpt.config.mode.as_str().into(),
        toggles: ckpt.config.toggles.label(),
        epoch: ckpt.epoch,
        report: report.clone(),
    }];
    write_text(&cfg.out.join("metrics.csv"), &metrics_csv(&rows, ds.manifest.num_classes))?;
    write_text(
        &cfg.out.join("summary.txt"),
        &format!(
            "{{\"config\": \"eval {}\", \"frames\": {}, \"accuracy\": {:?}, \"macro_f1\": {:?}}}\n",
            ckpt.config.mode.as_str(),
            preds.len(),
            report.accuracy,
            report.macro_f1
        ),
    )?;
    cfg.persist()?;
    println!("evaluated {} frames: accuracy {:.4}, macro F1 {:.4}", preds.len(), report.accuracy, report.macro_f1);
    Ok(())
}

// ── shared experiment plumbing ──────────────────────────────────────────────

/// The downstream task must not be the pretraining task: a different data
/// seed and a shifted generator (frequency band up a full cycle, noise at
/// four times the pretraining level) so transfer is across distribution,
/// not memorization. The shift is deliberately harsh enough that random
/// frozen features stay well below the pretrained ones; with a mild shift
/// every protocol saturates the small test folds and mode comparisons
/// degenerate to single-frame coin flips.
pub fn downstream_manifest(m: &DatasetManifest, seed: u64) -> DatasetManifest {
    let mut down = m.clone();
    down.seed = rng::derive(seed, "downstream-data");
    down.gen.freq_lo += 1.0;
    down.gen.freq_hi += 1.0;
    down.gen.noise_sigma *= 4.0;
    down
}

fn load_or_generate(path: Option<&Path>, manifest: &DatasetManifest) -> Result<Dataset> {
    match path {
        Some(p) => read_dataset(p),
        None => generate_dataset(manifest),
    }
}

fn experiment_datasets(
    cfg: &RunConfig,
    data: Option<&Path>,
    down_data: Option<&Path>,
) -> Result<(Dataset, Dataset)> {
    let mut pre_manifest = cfg.manifest.clone();
    pre_manifest.seed = rng::derive(cfg.seed, "pretrain-data");
    let pre = load_or_generate(data, &pre_manifest)?;
    let down = load_or_generate(down_data, &downstream_manifest(&pre.manifest, cfg.seed))?;
    if pre.manifest.image_size != down.manifest.image_size
        || pre.manifest.num_classes != down.manifest.num_classes
    {
        return Err(Error::ConfigError(
            "pretraining and downstream datasets must agree on image size and class count".into(),
        ));
    }
    Ok((pre, down))
}

fn median(xs: &mut Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite accuracies"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

// ── compare ─────────────────────────────────────────────────────────────────

pub fn cmd_compare(
    cfg: &mut RunConfig,
    modes: &str,
    seeds: &str,
    data: Option<&Path>,
    down_data: Option<&Path>,
) -> Result<()> {
    let kinds: Vec<PretrainKind> =
        modes.split(',').map(|s| PretrainKind::parse(s.trim())).collect::<Result<_>>()?;
    let seed_list: Vec<u64> = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::ConfigError(format!("bad seed {s} in --seeds")))
        })
        .collect::<Result<_>>()?;
    if kinds.is_empty() || seed_list.is_empty() {
        return Err(Error::ConfigError("compare needs at least one mode and one seed".into()));
    }
    let (pre_ds, down_ds) = experiment_datasets(cfg, data, down_data)?;
    cfg.align_to_dataset(&pre_ds.manifest);

    // One job per (mode, seed): pretrain in that mode at that seed, then
    // fine-tune on the first fold of the downstream set.
    let jobs: Vec<(PretrainKind, u64)> = kinds
        .iter()
        .flat_map(|&k| seed_list.iter().map(move |&s| (k, s)))
        .collect();
    let pre_base = cfg.pretrain;
    let fine_base = cfg.finetune;
    let curves = run_jobs(jobs.len(), cfg.finetune.threads, |i| {
        let (kind, run_seed) = jobs[i];
        let pre_cfg = PretrainConfig { seed: run_seed, ..pre_base };
        let backbone = prepare_backbone(kind, &pre_ds, &pre_cfg)?;
        let fine_cfg = eval::FinetuneConfig { seed: run_seed, threads: 1, ..fine_base };
        let split = fold_splits(&down_ds, fine_cfg.folds, run_seed)?.remove(0);
        let outcome = finetune(&backbone, &down_ds, &split.train_ids, &split.test_ids, &fine_cfg)?;
        Ok(outcome.epoch_accuracy)
    })?;

    let mut csv = String::from("mode,seed,epoch,accuracy\n");
    for ((kind, run_seed), accs) in jobs.iter().zip(&curves) {
        for (epoch, acc) in accs.iter().enumerate() {
            csv.push_str(&format!("{},{},{},{:?}\n", kind.as_str(), run_seed, epoch, acc));
        }
    }
    write_text(&cfg.out.join("curves.csv"), &csv)?;

    let mut summary = String::new();
    for &kind in &kinds {
        let mut finals: Vec<f64> = jobs
            .iter()
            .zip(&curves)
            .filter(|((k, _), _)| *k == kind)
            .map(|(_, accs)| *accs.last().expect("at least the pre-training entry"))
            .collect();
        let med = median(&mut finals);
        summary.push_str(&format!(
            "{{\"mode\": \"{}\", \"seeds\": {}, \"median_final_accuracy\": {:?}}}\n",
            kind.as_str(),
            seed_list.len(),
            med
        ));
        println!("{}: median final accuracy {:.4} over {} seeds", kind.as_str(), med, seed_list.len());
    }
    write_text(&cfg.out.join("summary.txt"), &summary)?;
    cfg.persist()?;
    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────────────

/// Row syntax: rows split on ';', terms within a row on ','. Terms are the
/// five contrastive toggles plus "soften".
pub fn parse_ablation_rows(spec: &str) -> Result<Vec<AblationSpec>> {
    let mut rows = Vec::new();
    for row in spec.split(';') {
        let mut toggles = TermToggles::none();
        let mut soften = false;
        for term in row.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match term {
                "ll" => toggles.ll = true,
                "mm" => toggles.mm = true,
                "gg" => toggles.gg = true,
                "gl" => toggles.gl = true,
                "gm" => toggles.gm = true,
                "soften" => soften = true,
                other => {
                    return Err(Error::ConfigError(format!(
                        "unknown ablation term {other}, expected ll | mm | gg | gl | gm | soften"
                    )))
                }
            }
        }
        rows.push(AblationSpec { toggles, soften });
    }
    Ok(rows)
}

pub fn cmd_ablate(
    cfg: &mut RunConfig,
    toggle_rows: &str,
    data: Option<&Path>,
    down_data: Option<&Path>,
) -> Result<()> {
    let specs = parse_ablation_rows(toggle_rows)?;
    let (pre_ds, down_ds) = experiment_datasets(cfg, data, down_data)?;
    cfg.align_to_dataset(&pre_ds.manifest);
    let rows = eval::run_ablation(&specs, &pre_ds, &down_ds, &cfg.pretrain, &cfg.finetune)?;

    let mut csv = String::from("row,toggles,soften,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std\n");
    let mut entries: Vec<(String, CrossValReport)> = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{:?},{:?},{:?},{:?}\n",
            i,
            row.spec.toggles.label(),
            row.spec.soften,
            row.cv.mean_accuracy,
            row.cv.std_accuracy,
            row.cv.mean_macro_f1,
            row.cv.std_macro_f1
        ));
        println!(
            "{}: accuracy {:.4} +- {:.4}",
            row.spec.label(),
            row.cv.mean_accuracy,
            row.cv.std_accuracy
        );
        entries.push((row.spec.label(), row.cv.clone()));
    }
    write_text(&cfg.out.join("ablation.csv"), &csv)?;
    write_text(&cfg.out.join("summary.txt"), &summary_text(&entries))?;
    cfg.persist()?;
    Ok(())
}

// ── sweep ───────────────────────────────────────────────────────────────────

pub fn cmd_sweep(
    cfg: &mut RunConfig,
    axis: &str,
    values: &str,
    data: Option<&Path>,
    down_data: Option<&Path>,
) -> Result<()> {
    let axis = SweepAxis::parse(axis)?;
    let values: Vec<f64> = values
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::ConfigError(format!("bad value {s} in --values")))
        })
        .collect::<Result<_>>()?;
    let (pre_ds, down_ds) = experiment_datasets(cfg, data, down_data)?;
    cfg.align_to_dataset(&pre_ds.manifest);
    let rows = eval::sweep(axis, &values, &pre_ds, &down_ds, &cfg.pretrain, &cfg.finetune)?;

    let mut csv = String::from("axis,value,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std\n");
    let mut entries: Vec<(String, CrossValReport)> = Vec::new();
    for row in &rows {
        csv.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?}\n",
            row.axis.as_str(),
            row.value,
            row.cv.mean_accuracy,
            row.cv.std_accuracy,
            row.cv.mean_macro_f1,
            row.cv.std_macro_f1
        ));
        println!("{}={}: accuracy {:.4} +- {:.4}", row.axis.as_str(), row.value, row.cv.mean_accuracy, row.cv.std_accuracy);
        entries.push((format!("{}={}", row.axis.as_str(), row.value), row.cv.clone()));
    }
    write_text(&cfg.out.join("sweep.csv"), &csv)?;
    write_text(&cfg.out.join("summary.txt"), &summary_text(&entries))?;
    cfg.persist()?;
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────────

pub fn cmd_gradcheck(out: &Path, target: &str, size: usize, channels: usize, seed: u64) -> Result<()> {
    let lines = match target {
        "primitives" => checks::check_primitives(seed)?,
        "losses" => checks::check_losses(seed)?,
        "full" => checks::check_full(size, channels, seed)?,
        other => {
            return Err(Error::ConfigError(format!(
                "unknown gradcheck target {other}, expected primitives | losses | full"
            )))
        }
    };
    let report = checks::render_report(&lines);
    print!("{report}");
    write_text(&out.join("gradcheck.txt"), &report)?;
    let resolved = format!("target={target}\nsize={size}\nchannels={channels}\nseed={seed}\nout={}\n", out.display());
    write_text(&out.join("resolved.cfg"), &resolved)?;
    checks::verdict(&lines)
}
