//! Trains a model on a synthetic task and prints the per-epoch log.
//!
//! ```text
//! cargo run --release --example train_synthetic -- disks2d 64 3 40
//! ```

use std::time::Instant;

use octree_nca::io::{synth_dataset, SynthTask};
use octree_nca::model::ModelConfig;
use octree_nca::octree::SchedulePolicy;
use octree_nca::train::{fit, TrainConfig};
use octree_nca::OctreeModel;

fn main() -> octree_nca::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_owned());
    let task: SynthTask = arg(0, "disks2d").parse()?;
    let size: usize = arg(1, "64").parse().expect("size");
    let levels: usize = arg(2, "3").parse().expect("levels");
    let epochs: usize = arg(3, "40").parse().expect("epochs");
    let train_count: usize = arg(4, "24").parse().expect("train count");
    let floor: usize = arg(5, "4").parse().expect("extent floor");

    let extents = vec![size; task.spatial_rank()];
    let train = synth_dataset(task, train_count, &extents, 1)?;
    let val = synth_dataset(task, 8, &extents, 2)?;
    let mut cfg = ModelConfig::new(task.spatial_rank(), 1, 1);
    cfg.policy = SchedulePolicy {
        extent_floor: floor,
        ..SchedulePolicy::with_levels(levels)
    };
    let model = OctreeModel::new(cfg, &extents, 7)?;
    let tc = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = fit(model, &train, &val, &tc, None)?;
    for r in &out.history {
        println!("epoch {:3} loss {:.4} dice {:?} lr {:.6}", r.epoch, r.loss, r.val_dice, r.lr);
    }
    println!("{} epochs in {:.1}s", out.epochs_run, start.elapsed().as_secs_f64());
    Ok(())
}
