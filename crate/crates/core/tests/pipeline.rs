//! End-to-end behaviour of the multi-level pipeline across engines,
//! worker counts and files.

use octree_nca::grid::{CellGrid, GridShape};
use octree_nca::io::{load_image, save_image, save_mask, load_mask, synth_sample, SynthTask};
use octree_nca::memory::MemoryTracker;
use octree_nca::model::{decode_model, encode_model, ModelConfig};
use octree_nca::octree::SchedulePolicy;
use octree_nca::par::with_workers;
use octree_nca::{segment, EngineKind, OctreeModel};

fn model(rank: usize, levels: usize, extents: &[usize], seed: u64) -> OctreeModel {
    let mut cfg = ModelConfig::new(rank, 1, 1);
    cfg.policy = SchedulePolicy {
        extent_floor: 4,
        ..SchedulePolicy::with_levels(levels)
    };
    OctreeModel::new_generic(cfg, extents, seed).unwrap()
}

#[test]
fn engines_agree_on_2d_and_3d_pipelines() {
    for (extents, task) in [(vec![40, 32], SynthTask::Disks2d), (vec![16, 16, 8], SynthTask::Blobs3d)] {
        let m = model(extents.len(), 2, &extents, 5);
        let s = synth_sample(task, &extents, 9).unwrap();
        let a = segment(&s.image, &m, EngineKind::Fused, 3, None).unwrap();
        let b = segment(&s.image, &m, EngineKind::Reference, 3, None).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.logits.data(), b.logits.data());
    }
}

#[test]
fn segmentation_is_independent_of_worker_count() {
    let m = model(2, 3, &[48, 48], 1);
    let s = synth_sample(SynthTask::Disks2d, &[48, 48], 2).unwrap();
    let runs: Vec<_> = [1, 2, 8]
        .into_iter()
        .map(|w| with_workers(w, || segment(&s.image, &m, EngineKind::Fused, 11, None).unwrap().logits))
        .collect();
    assert!(runs.windows(2).all(|p| p[0].data() == p[1].data()));
}

#[test]
fn different_seeds_give_different_stochastic_paths() {
    let m = model(2, 2, &[32, 32], 4);
    let s = synth_sample(SynthTask::Disks2d, &[32, 32], 3).unwrap();
    let a = segment(&s.image, &m, EngineKind::Fused, 1, None).unwrap();
    let b = segment(&s.image, &m, EngineKind::Fused, 2, None).unwrap();
    assert_ne!(a.logits.data(), b.logits.data());
}

#[test]
fn fused_pipeline_memory_stays_below_reference() {
    let m = model(2, 3, &[64, 64], 8);
    let s = synth_sample(SynthTask::Disks2d, &[64, 64], 1).unwrap();
    let (tf, tr) = (MemoryTracker::new(), MemoryTracker::new());
    let f = segment(&s.image, &m, EngineKind::Fused, 0, Some(&tf)).unwrap().memory.unwrap();
    let r = segment(&s.image, &m, EngineKind::Reference, 0, Some(&tr)).unwrap().memory.unwrap();
    assert!(f.persistent_per_cell() < 40.0, "{}", f.persistent_per_cell());
    assert!(r.persistent_per_cell() > 2.5 * f.persistent_per_cell());
    assert_eq!(f.peak_intermediate_floats, 0);
}

#[test]
fn model_and_data_files_roundtrip_into_identical_masks() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(2, 2, &[32, 32], 6);
    let bytes = encode_model(&m).unwrap();
    let m2 = decode_model(&bytes).unwrap();
    assert_eq!(m2, m);

    let s = synth_sample(SynthTask::Disks2d, &[32, 32], 4).unwrap();
    let img_path = dir.path().join("img.ovol");
    save_image(&s.image, &img_path).unwrap();
    let img = load_image(&img_path).unwrap();
    assert_eq!(img, s.image);
    let a = segment(&img, &m2, EngineKind::Fused, 0, None).unwrap();
    let b = segment(&s.image, &m, EngineKind::Fused, 0, None).unwrap();
    let mask_path = dir.path().join("mask.png");
    save_mask(&a.mask, &mask_path).unwrap();
    assert_eq!(load_mask(&mask_path).unwrap(), b.mask);
}

#[test]
fn inputs_of_other_sizes_reuse_the_same_model() {
    let m = model(2, 3, &[64, 64], 2);
    let image = CellGrid::new(GridShape::new(vec![37, 90], 1).unwrap(), vec![0.5; 37 * 90], 1).unwrap();
    let r = segment(&image, &m, EngineKind::Fused, 0, None).unwrap();
    assert_eq!(r.mask.dims(), &[37, 90]);
    assert_eq!(r.schedule.levels[0].extents, vec![10, 23]);
}
