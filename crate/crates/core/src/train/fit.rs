use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{crop_patch, crop_patch_adjoint, nn_upsample_adjoint, seed_from_image, CellGrid};
use crate::model::{save_model, OctreeModel};
use crate::octree::{build_pyramid, build_schedule, segment, select_channels, transfer_state, EngineKind};
use crate::par::map_slice;
use crate::reference::{backward_rollout, rollout_reference, RolloutParams, RolloutTape};
use crate::rng::mix;
use crate::scalar::Real;
use crate::train::loss::{class_overlap, logits_loss, Overlap};
use crate::train::optim::{adam_update, ema_update, OptimizerState, TrainConfig};
use crate::train::patch::{sample_patch, LevelWindow};
use crate::train::Sample;

struct LevelTrace<T: Real> {
    tape: RolloutTape<T>,
    /// Extents of the rolled-out grid (window size when patched).
    dims: Vec<usize>,
}

/// Loss of one instance and its gradient with respect to all parameters,
/// flattened level by level like [`OctreeModel::flat_params`].
pub fn instance_gradient<T: Real>(
    model: &OctreeModel<T>,
    sample: &Sample<T>,
    windows: &[Option<LevelWindow>],
    fire_seed: u64,
    lambda_dice: f64,
) -> Result<(T, Vec<T>)> {
    let (loss, traces, final_state) = forward(model, sample, windows, fire_seed, lambda_dice, true)?;
    let cfg = &model.config;
    let k = cfg.num_classes;
    let logit_range = cfg.logit_channels();

    let mut g = CellGrid::from_parts(final_state.shape().clone(), vec![T::ZERO; final_state.data().len()], cfg.image_channels);
    let c = cfg.channels;
    for (cell, lg) in g.data_mut().chunks_exact_mut(c).zip(loss.grad.chunks_exact(k)) {
        cell[logit_range.clone()].copy_from_slice(lg);
    }

    let schedule = build_schedule(sample.image.dims(), &cfg.policy)?;
    let mut level_grads = Vec::with_capacity(model.num_levels());
    for l in (0..model.num_levels()).rev() {
        let r = backward_rollout(&traces[l].tape, &model.levels[l], &g)?;
        level_grads.push(r.weights);
        if l == 0 {
            break;
        }
        let f = schedule.levels[l - 1].factors.as_ref().expect("coarse level factors");
        let g_full = match (&windows[l], &windows[l - 1]) {
            (Some(w), None) => crop_patch_adjoint(&r.input, &w.origin, &schedule.levels[l].extents)?,
            _ => r.input,
        };
        g = nn_upsample_adjoint(&g_full, f, &traces[l - 1].dims)?;
    }
    level_grads.reverse();
    let flat = level_grads.iter().flat_map(|w| w.blob().iter().copied()).collect();
    Ok((loss.loss, flat))
}

/// Loss of one instance without gradients.
pub fn instance_loss<T: Real>(
    model: &OctreeModel<T>,
    sample: &Sample<T>,
    windows: &[Option<LevelWindow>],
    fire_seed: u64,
    lambda_dice: f64,
) -> Result<T> {
    Ok(forward(model, sample, windows, fire_seed, lambda_dice, false)?.0.loss)
}

/// Distance of one instance's forward pass from the nearest ReLU kink,
/// see [`RolloutTape::min_abs_preactivation`].
pub fn preactivation_margin<T: Real>(
    model: &OctreeModel<T>,
    sample: &Sample<T>,
    windows: &[Option<LevelWindow>],
    fire_seed: u64,
) -> Result<f64> {
    let (_, traces, _) = forward(model, sample, windows, fire_seed, 1.0, true)?;
    Ok(traces
        .iter()
        .filter_map(|t| t.tape.min_abs_preactivation())
        .fold(f64::INFINITY, f64::min))
}

type Forward<T> = (crate::train::loss::LossOutput<T>, Vec<LevelTrace<T>>, CellGrid<T>);

fn forward<T: Real>(
    model: &OctreeModel<T>,
    sample: &Sample<T>,
    windows: &[Option<LevelWindow>],
    fire_seed: u64,
    lambda_dice: f64,
    record: bool,
) -> Result<Forward<T>> {
    let cfg = &model.config;
    let schedule = build_schedule(sample.image.dims(), &cfg.policy)?;
    if windows.len() != schedule.num_levels() || model.num_levels() != schedule.num_levels() {
        return Err(invalid("window plan, model and schedule disagree on the level count"));
    }
    let pyramid = build_pyramid(&sample.image, &schedule)?;
    let mut traces = Vec::with_capacity(schedule.num_levels());
    let mut state: Option<CellGrid<T>> = None;
    for (l, spec) in schedule.levels.iter().enumerate() {
        let image_l = match &windows[l] {
            Some(w) => crop_patch(&pyramid[l], &w.origin, &w.size)?,
            None => pyramid[l].clone(),
        };
        let seeded = match state.take() {
            None => seed_from_image(&image_l, cfg.channels)?,
            Some(prev) => {
                let f = schedule.levels[l - 1].factors.as_ref().expect("coarse level factors");
                match (&windows[l], &windows[l - 1]) {
                    (Some(w), None) => crop_patch(&transfer_state(&prev, &pyramid[l], f)?, &w.origin, &w.size)?,
                    (None, Some(_)) => return Err(invalid("a patched level cannot precede a full level")),
                    _ => transfer_state(&prev, &image_l, f)?,
                }
            }
        };
        let dims = seeded.dims().to_vec();
        let params = RolloutParams::new(spec.steps, fire_seed, l as u64, cfg.fire_rate);
        let (out, tape) = rollout_reference(seeded, &model.levels[l], &params, record)?;
        if let Some(tape) = tape {
            traces.push(LevelTrace { tape, dims });
        }
        state = Some(out);
    }
    let final_state = state.expect("at least one level");
    let labels = match windows.last().expect("at least one level") {
        Some(w) => sample.mask.crop(&w.origin, &w.size)?,
        None => sample.mask.clone(),
    };
    let logits = select_channels(&final_state, cfg.logit_channels())?;
    let loss = logits_loss(logits.data(), labels.labels(), cfg.num_classes, lambda_dice)?;
    if !loss.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {:?}", loss.loss)));
    }
    Ok((loss, traces, final_state))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_dice: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last optimizer step.
    pub model: OctreeModel<f32>,
    /// EMA shadow; this is the model to evaluate and ship.
    pub shadow: OctreeModel<f32>,
    pub optimizer: OptimizerState<f32>,
    pub history: Vec<EpochRecord>,
    pub epochs_run: usize,
}

/// Hard-mask Dice over foreground classes, pooled over all samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiceReport {
    /// Indexed by class id; entry 0 (background) is always `None`.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the classes present in prediction or target; 1.0 when none is.
    pub mean: f64,
}

pub fn evaluate_dice<T: Real>(
    model: &OctreeModel<T>,
    samples: &[Sample<T>],
    engine: EngineKind,
    seed: u64,
) -> Result<DiceReport> {
    let k = model.config.num_classes;
    let classes = if k == 1 { 1 } else { k - 1 };
    let mut overlaps = vec![Overlap::default(); classes + 1];
    for s in samples {
        let pred = segment(&s.image, model, engine, seed, None)?.mask;
        for (class, o) in overlaps.iter_mut().enumerate().skip(1) {
            o.add(class_overlap(&pred, &s.mask, class as u8)?);
        }
    }
    let per_class: Vec<Option<f64>> = overlaps
        .iter()
        .enumerate()
        .map(|(c, o)| if c == 0 { None } else { o.dice() })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(DiceReport { per_class, mean })
}

fn item_seed(master: u64, epoch: usize, batch: usize, item: usize) -> u64 {
    mix(mix(mix(master) ^ epoch as u64) ^ ((batch as u64) << 20 | item as u64))
}

fn epoch_rng(master: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(master ^ 0x5851_F42D_4C95_7F2D) ^ epoch as u64)
}

/// Mean loss and mean gradient over a batch. Items are processed in
/// parallel; the sum runs in item order.
pub fn batch_gradient<T: Real>(
    model: &OctreeModel<T>,
    items: &[(&Sample<T>, Vec<Option<LevelWindow>>, u64)],
    lambda_dice: f64,
) -> Result<(T, Vec<T>)> {
    if items.is_empty() {
        return Err(invalid("empty batch"));
    }
    let results = map_slice(items, |(s, w, seed)| instance_gradient(model, s, w, *seed, lambda_dice));
    let mut loss = T::ZERO;
    let mut grads = vec![T::ZERO; crate::model::count_params(model)];
    for r in results {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    let inv = T::ONE / T::from_f64(items.len() as f64);
    for v in &mut grads {
        *v *= inv;
    }
    Ok((loss * inv, grads))
}

/// Trains `model` on `train`, validating the EMA shadow on `val`.
///
/// Each epoch visits `min(batches_per_epoch, ceil(len / batch_size))`
/// batches of a fresh permutation. With a patch plan, samples whose windows
/// never hit foreground are left out of their batch. `log_csv` receives one
/// `epoch,loss,val_dice,lr` row per epoch.
pub fn fit(
    model: OctreeModel<f32>,
    train: &[Sample<f32>],
    val: &[Sample<f32>],
    cfg: &TrainConfig,
    log_csv: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(invalid("training set is empty"));
    }
    let mut log = match log_csv {
        Some(p) => {
            let mut w = csv::Writer::from_path(p)?;
            w.write_record(["epoch", "loss", "val_dice", "lr"])?;
            w.flush()?;
            Some(w)
        }
        None => None,
    };
    let mut model = model;
    let mut params = model.flat_params();
    let mut opt = OptimizerState::new(&params, cfg.lr0);
    let mut shadow = model.clone();
    let mut history = Vec::new();
    let per_epoch = train.len().div_ceil(cfg.batch_size).min(cfg.batches_per_epoch);
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let lr = opt.lr;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for b in 0..per_epoch {
            let mut items = Vec::with_capacity(cfg.batch_size);
            for (i, &idx) in order.iter().cycle().skip(b * cfg.batch_size).take(cfg.batch_size).enumerate() {
                let s = &train[idx];
                let windows = match &cfg.patch {
                    Some(plan) => {
                        let schedule = build_schedule(s.image.dims(), &model.config.policy)?;
                        match sample_patch(&s.mask, &schedule, plan, &mut rng) {
                            Ok(w) => w,
                            Err(Error::NoForeground(_)) => continue,
                            Err(e) => return Err(e),
                        }
                    }
                    None => vec![None; model.num_levels()],
                };
                items.push((s, windows, item_seed(cfg.seed, epoch, b, i)));
            }
            if items.is_empty() {
                continue;
            }
            let (loss, grads) = batch_gradient(&model, &items, cfg.lambda_dice)?;
            adam_update(&mut opt, &mut params, &grads, cfg)?;
            ema_update(&mut opt.shadow, &params, cfg.ema_alpha);
            loss_sum += loss as f64;
            batches += 1;
            model.set_flat_params(&params)?;
        }
        shadow.set_flat_params(&opt.shadow)?;
        opt.end_epoch(cfg);
        epochs_run = epoch + 1;

        let validate = !val.is_empty() && (epochs_run % cfg.validate_every == 0 || epochs_run == cfg.epochs);
        let val_dice = if validate {
            Some(evaluate_dice(&shadow, val, EngineKind::Fused, cfg.seed)?.mean)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            val_dice,
            lr,
        };
        if let Some(w) = log.as_mut() {
            w.write_record([
                record.epoch.to_string(),
                format!("{}", record.loss),
                record.val_dice.map(|d| d.to_string()).unwrap_or_default(),
                format!("{}", record.lr),
            ])?;
            w.flush()?;
        }
        history.push(record);
        if let (Some(target), Some(d)) = (cfg.target_dice, val_dice) {
            if d >= target {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        shadow,
        optimizer: opt,
        history,
        epochs_run,
    })
}

#[derive(Serialize)]
struct CheckpointSidecar {
    epoch: usize,
    optimizer_step: u64,
    lr: f64,
}

/// Writes the shadow model to `path` and optimizer progress to
/// `path` with `.json` appended.
pub fn save_checkpoint(outcome: &TrainOutcome, path: &Path) -> Result<()> {
    save_model(&outcome.shadow, path)?;
    let sidecar = CheckpointSidecar {
        epoch: outcome.epochs_run,
        optimizer_step: outcome.optimizer.step,
        lr: outcome.optimizer.lr,
    };
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    let mut f = std::fs::File::create(side)?;
    serde_json::to_writer_pretty(&mut f, &sidecar)?;
    f.write_all(b"\n")?;
    Ok(())
}
