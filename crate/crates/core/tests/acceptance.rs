//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `cargo test --release -p octree-nca --test acceptance` runs everything;
//! pass criterion numbers as arguments (`-- 1 5`) to run a subset.

use std::time::Instant;

use octree_nca::bench::{bench_scaling, linear_fit, measure_once, random_image, BenchConfig, BenchMode};
use octree_nca::grid::{CellGrid, GridShape};
use octree_nca::io::synth::{synth_dataset, SynthTask};
use octree_nca::memory::MemoryTracker;
use octree_nca::model::{encode_model, ModelConfig, NcaWeights, WeightDims};
use octree_nca::octree::{build_schedule, SchedulePolicy};
use octree_nca::par::with_workers;
use octree_nca::reference::{rollout_reference, RolloutParams};
use octree_nca::train::gradcheck::{gradcheck_with, GRADCHECK_TOLERANCE};
use octree_nca::train::loss::{bce_loss, combined_loss, dice_loss};
use octree_nca::train::{fit, TrainConfig};
use octree_nca::{segment, EngineKind, FireDecision, FusedEngine, OctreeModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_state(dims: Vec<usize>, channels: usize, rng: &mut ChaCha8Rng) -> CellGrid {
    let shape = GridShape::new(dims, channels).unwrap();
    let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
    CellGrid::new(shape, data, 1).unwrap()
}

fn engine_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases = 120;
    let mut max_abs = 0.0f32;
    let mut identical = 0;
    for case in 0..cases {
        let rank = if case % 3 == 2 { 3 } else { 2 };
        let dims: Vec<usize> = if rank == 2 {
            vec![rng.gen_range(1..=64), rng.gen_range(1..=64)]
        } else {
            vec![rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=8)]
        };
        let (c, h) = if case % 2 == 0 { (16, 64) } else { (rng.gen_range(2..=12), rng.gen_range(4..=40)) };
        let w = NcaWeights::<f32>::init_generic(WeightDims::new(rank, c, h).unwrap(), rng.gen());
        let state = random_state(dims, c, &mut rng);
        let params = RolloutParams::new(rng.gen_range(1..=50), rng.gen(), rng.gen_range(0..5), 0.5);
        let (r, _) = rollout_reference(state.clone(), &w, &params, false).map_err(|e| e.to_string())?;
        let f = FusedEngine::new(w.dims()).rollout(state, &w, &params).map_err(|e| e.to_string())?;
        let d = r.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        max_abs = max_abs.max(d);
        identical += usize::from(r.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        max_abs <= 1e-5 && identical == cases && secs <= 120.0,
        format!("{cases} cases, {identical} bit-identical, max abs diff {max_abs:e}, {secs:.1}s"),
    )
}

fn rollout_memory(engine: EngineKind, side: usize, steps: usize) -> Result<octree_nca::MemoryReport, String> {
    let mut cfg = ModelConfig::new(2, 1, 1);
    cfg.policy = SchedulePolicy::with_levels(1);
    let model = OctreeModel::new_generic(cfg, &[side, side], 1).map_err(|e| e.to_string())?;
    let image = random_image(&[side, side], 1, 3).map_err(|e| e.to_string())?;
    measure_once(&model, engine, &image, BenchMode::Rollout, steps, 5, &MemoryTracker::new()).map_err(|e| e.to_string())
}

fn memory_law() -> Outcome {
    let f = rollout_memory(EngineKind::Fused, 128, 10)?;
    let r = rollout_memory(EngineKind::Reference, 128, 10)?;
    let (pf, pr) = (f.persistent_per_cell(), r.persistent_per_cell());
    let ratio = pr / pf;
    check(
        (32.0..=33.0).contains(&pf) && pr >= 96.0 && ratio >= 2.5,
        format!("fused {pf:.3} floats/cell, reference {pr:.3} floats/cell, ratio {ratio:.2}"),
    )
}

fn linear_scaling() -> Outcome {
    let mut cfg = ModelConfig::new(2, 1, 1);
    cfg.policy = SchedulePolicy::with_levels(1);
    let model = OctreeModel::new_generic(cfg, &[64, 64], 1).map_err(|e| e.to_string())?;
    let bench = BenchConfig {
        sizes: [64, 128, 256, 512, 1024].iter().map(|&s| vec![s, s]).collect(),
        engines: vec![EngineKind::Fused],
        repetitions: 3,
        mode: BenchMode::Rollout,
        steps: 4,
        seed: 0,
        memory_limit: None,
    };
    let rows = bench_scaling(&model, &bench).map_err(|e| e.to_string())?;
    let cells: Vec<f64> = rows.iter().map(|r| r.cells as f64).collect();
    let mem: Vec<f64> = rows.iter().map(|r| r.peak_persistent.unwrap_or(0) as f64).collect();
    let time: Vec<f64> = rows.iter().map(|r| r.seconds.unwrap_or(0.0)).collect();
    let fm = linear_fit(&cells, &mem).map_err(|e| e.to_string())?;
    let ft = linear_fit(&cells, &time).map_err(|e| e.to_string())?;
    check(
        fm.r_squared >= 0.99 && ft.r_squared >= 0.97,
        format!(
            "memory R^2 {:.6} (slope {:.3} floats/cell), time R^2 {:.4} (1024^2: {:.2}s)",
            fm.r_squared,
            fm.slope,
            ft.r_squared,
            time.last().copied().unwrap_or(0.0)
        ),
    )
}

fn steps_independence() -> Outcome {
    let a = rollout_memory(EngineKind::Fused, 256, 10)?;
    let b = rollout_memory(EngineKind::Fused, 256, 100)?;
    check(
        a.peak_persistent_floats == b.peak_persistent_floats,
        format!("peak {} floats at 10 steps, {} at 100 steps", a.peak_persistent_floats, b.peak_persistent_floats),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let seeds = 12;
    for seed in 0..seeds {
        let r = gradcheck_with(seed, seed % 2 == 1).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= GRADCHECK_TOLERANCE && secs <= 60.0,
        format!("{seeds} seeds on 8x8 grids (half with windows), worst relative error {worst:.2e}, {secs:.1}s"),
    )
}

/// A flood-fill rule: a cell raises a flag in channel 1 (mirrored into the
/// last, logit, channel) when its image value exceeds one half or any cell
/// in its neighbourhood is flagged. Flags never fade, so a signal spreads one
/// cell per update without decaying.
fn flood_weights(dims: WeightDims) -> NcaWeights<f32> {
    let (c, h, taps) = (dims.channels, dims.hidden, dims.kernel_taps());
    let mut w = NcaWeights::<f32>::zeros(dims);
    let p = w.parts_mut();
    p.conv[taps..2 * taps].fill(1.0);
    // z = 2 * (image + flags in the neighbourhood); flag = clamp(z - 1, 0, 1)
    for unit in 0..2 {
        p.w1[unit] = 2.0;
        p.w1[(c + 1) * h + unit] = 2.0;
    }
    p.b1[0] = -1.0;
    p.b1[1] = -2.0;
    p.w1[h + 2] = 1.0;
    p.w1[(c - 1) * h + 3] = 1.0;
    for target in [1, c - 1] {
        p.w2[target] = 1.0;
        p.w2[c + target] = -1.0;
    }
    p.w2[2 * c + 1] = -1.0;
    p.w2[3 * c + c - 1] = -1.0;
    w
}

fn propagation_speed() -> Outcome {
    // impulse: compare rollouts with and without a perturbed centre cell
    let side = 33;
    let centre = side / 2;
    let w = NcaWeights::<f32>::init_generic(WeightDims::new(2, 16, 64).unwrap(), 9);
    let base = CellGrid::zeros(GridShape::new(vec![side, side], 16).unwrap(), 1).unwrap();
    let mut kicked = base.clone();
    let i = kicked.index(&[centre, centre]);
    kicked.cell_mut(i)[5] = 1.0;
    let mut detail = Vec::new();
    let mut ok = true;
    for (k, rate) in [(3usize, 1.0f32), (6, 1.0), (6, 0.5), (12, 0.5)] {
        let p = RolloutParams::new(k, 4, 0, rate);
        let (a, _) = rollout_reference(base.clone(), &w, &p, false).map_err(|e| e.to_string())?;
        let (b, _) = rollout_reference(kicked.clone(), &w, &p, false).map_err(|e| e.to_string())?;
        let mut radius = 0;
        for y in 0..side {
            for x in 0..side {
                let idx = a.index(&[y, x]);
                if a.cell(idx) != b.cell(idx) {
                    radius = radius.max(y.abs_diff(centre).max(x.abs_diff(centre)));
                }
            }
        }
        ok &= radius <= k && (rate < 1.0 || radius == k);
        detail.push(format!("k={k} rate={rate}: radius {radius}"));
    }

    // far-corner influence on a 128x128 image, for random weights and for a
    // flood-fill rule
    let far_corner_change = |levels: usize, flood: bool| -> Result<f32, String> {
        let mut cfg = ModelConfig::new(2, 1, 1);
        cfg.policy = SchedulePolicy {
            refine_steps: 10,
            alpha0: 1.0,
            coarsest_steps: if levels == 1 { Some(10) } else { None },
            ..SchedulePolicy::with_levels(levels)
        };
        let mut model = OctreeModel::<f32>::new_generic(cfg, &[128, 128], 21).map_err(|e| e.to_string())?;
        if flood {
            let w = flood_weights(model.weight_dims());
            model.levels.iter_mut().for_each(|l| *l = w.clone());
        }
        let plain = CellGrid::new(GridShape::new(vec![128, 128], 1).unwrap(), vec![0.3; 128 * 128], 1).unwrap();
        let mut marked = plain.clone();
        for y in 0..16 {
            for x in 0..16 {
                let i = marked.index(&[y, x]);
                marked.cell_mut(i)[0] = 1.0;
            }
        }
        let a = segment(&plain, &model, EngineKind::Fused, 2, None).map_err(|e| e.to_string())?;
        let b = segment(&marked, &model, EngineKind::Fused, 2, None).map_err(|e| e.to_string())?;
        let mut change = 0.0f32;
        for y in 112..128 {
            for x in 112..128 {
                let i = a.logits.index(&[y, x]);
                change = change.max((a.logits.cell(i)[0] - b.logits.cell(i)[0]).abs());
            }
        }
        Ok(change)
    };
    for (flood, name) in [(false, "random weights"), (true, "flood-fill rule")] {
        let octree = far_corner_change(5, flood)?;
        let flat = far_corner_change(1, flood)?;
        ok &= octree > 0.0 && flat == 0.0;
        detail.push(format!("far-corner logit change with {name}: 5-level {octree:.3e}, flat {flat:.1e}"));
    }
    check(ok, detail.join("; "))
}

fn train_model(task: SynthTask, levels: usize, coarsest_steps: Option<usize>, epochs: usize, target: Option<f64>) -> Result<(f64, usize, f64), String> {
    let ext = [64, 64];
    let train = synth_dataset(task, 24, &ext, 1).map_err(|e| e.to_string())?;
    let val = synth_dataset(task, 8, &ext, 2).map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::new(2, 1, 1);
    cfg.policy = SchedulePolicy {
        extent_floor: 4,
        coarsest_steps,
        ..SchedulePolicy::with_levels(levels)
    };
    let model = OctreeModel::new(cfg, &ext, 7).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs,
        target_dice: target,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = fit(model, &train, &val, &tc, None).map_err(|e| e.to_string())?;
    let dice = out.history.last().and_then(|r| r.val_dice).unwrap_or(0.0);
    Ok((dice, out.epochs_run, start.elapsed().as_secs_f64()))
}

fn desk_training() -> Outcome {
    let (disks, disk_epochs, disk_secs) = train_model(SynthTask::Disks2d, 3, None, 200, Some(0.95))?;
    let (deep, epochs, deep_secs) = train_model(SynthTask::Stripes2d, 5, None, 200, Some(0.95))?;
    let (flat, _, flat_secs) = train_model(SynthTask::Stripes2d, 1, Some(10), epochs, None)?;
    check(
        disks >= 0.95 && disk_secs <= 1800.0 && deep - flat >= 0.10,
        format!(
            "disks2d dice {disks:.4} after {disk_epochs} epochs ({disk_secs:.0}s); stripes2d over {epochs} epochs: \
             5-level {deep:.4} ({deep_secs:.0}s) vs 1-level {flat:.4} ({flat_secs:.0}s)"
        ),
    )
}

fn hyperparameters() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |cond: bool, what: &str| {
        if !cond {
            failures.push(what.to_owned());
        }
    };
    let t = TrainConfig::default();
    expect(t.lr0 == 1.6e-3, "lr0");
    expect(t.lr_decay == 0.9992, "lr decay");
    expect((t.beta1, t.beta2) == (0.9, 0.99), "Adam betas");
    expect(t.ema_alpha == 0.99, "EMA alpha");
    expect(t.batch_size == 3, "batch size");

    let probs = [0.9f64, 0.2, 0.6, 0.3, 0.75, 0.1];
    let target = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0];
    let bce = bce_loss(&probs, &target, 1).unwrap();
    let dice = dice_loss(&probs, &target, 1).unwrap();
    expect((combined_loss(&probs, &target, 1, 0.0).unwrap() - 2.0 * bce).abs() < 1e-12, "lambda 0 gives 2 BCE");
    expect((combined_loss(&probs, &target, 1, 2.0).unwrap() - 2.0 * dice).abs() < 1e-12, "lambda 2 gives 2 Dice");

    let cfg = ModelConfig::new(2, 1, 1);
    expect(cfg.fire_rate == 0.5, "fire rate default");
    let n = 200_000usize;
    let fired = FireDecision::new(17, 0, 3, cfg.fire_rate).mask(n).iter().filter(|&&f| f).count() as f64;
    let sigma = (n as f64 * 0.25).sqrt();
    expect((fired - 0.5 * n as f64).abs() <= 3.0 * sigma, "fire rate within 3 sigma");

    let p = SchedulePolicy::default();
    expect(p.refine_steps == 10 && p.alpha0 == 1.0, "schedule defaults");
    let s = build_schedule(&[100, 60], &SchedulePolicy { alpha0: 1.5, ..SchedulePolicy::with_levels(3) }).unwrap();
    expect(s.levels[0].extents == vec![25, 15] && s.levels[0].steps == 38, "coarsest steps ceil(alpha0 * max extent)");
    let r = build_schedule(&[320, 320, 24], &p).unwrap();
    let table: Vec<Vec<usize>> = r.levels.iter().map(|l| l.extents.clone()).collect();
    expect(
        table == vec![vec![20, 20, 6], vec![40, 40, 6], vec![80, 80, 6], vec![160, 160, 12], vec![320, 320, 24]],
        "radiology level table",
    );
    expect(r.levels[0].steps == 20 && r.levels[1..].iter().all(|l| l.steps == 10), "radiology steps");
    let detail = format!("fire fraction {:.4} over {n} cells; level table {table:?}", fired / n as f64);
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; wrong: {}", failures.join(", ")))
    }
}

fn determinism() -> Outcome {
    let ext = [32, 32];
    let train = synth_dataset(SynthTask::Disks2d, 6, &ext, 11).map_err(|e| e.to_string())?;
    let val = synth_dataset(SynthTask::Disks2d, 2, &ext, 12).map_err(|e| e.to_string())?;
    let probe = synth_dataset(SynthTask::Disks2d, 1, &[48, 40], 13).map_err(|e| e.to_string())?;
    let run = |workers: usize| -> Result<(Vec<u8>, Vec<u8>), String> {
        with_workers(workers, || {
            let mut cfg = ModelConfig::new(2, 1, 1);
            cfg.policy = SchedulePolicy {
                extent_floor: 4,
                ..SchedulePolicy::with_levels(3)
            };
            let model = OctreeModel::new(cfg, &ext, 99).map_err(|e| e.to_string())?;
            let tc = TrainConfig {
                epochs: 2,
                batches_per_epoch: 2,
                seed: 1234,
                ..TrainConfig::default()
            };
            let out = fit(model, &train, &val, &tc, None).map_err(|e| e.to_string())?;
            let bytes = encode_model(&out.shadow).map_err(|e| e.to_string())?;
            let mask = segment(&probe[0].image, &out.shadow, EngineKind::Fused, 77, None).map_err(|e| e.to_string())?.mask;
            Ok((bytes, mask.labels().to_vec()))
        })
    };
    let runs = [run(1)?, run(1)?, run(2)?, run(8)?];
    let same = runs.iter().all(|r| *r == runs[0]);
    check(
        same,
        format!("checkpoint ({} bytes) and mask identical over 2 runs and 1/2/8 workers: {same}", runs[0].0.len()),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "engine equivalence", engine_equivalence),
        (2, "memory law", memory_law),
        (3, "linear scaling", linear_scaling),
        (4, "steps independence", steps_independence),
        (5, "gradient correctness", gradient_correctness),
        (6, "propagation speed", propagation_speed),
        (7, "desk-scale training", desk_training),
        (8, "hyperparameter fidelity", hyperparameters),
        (9, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {id}. {name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
