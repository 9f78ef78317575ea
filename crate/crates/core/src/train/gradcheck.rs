//! Finite-difference check of the full training gradient.
//!
//! A small double-precision model (8 channels, 16 hidden units, two levels
//! over an 8x8 image) is differentiated analytically through both rollouts,
//! the state transfer and the combined loss, and compared parameter by
//! parameter with central differences. Weights come from
//! [`NcaWeights::init_smooth`](crate::model::NcaWeights::init_smooth), which
//! keeps every pre-activation far from the ReLU kink, so the loss is smooth
//! across each difference stencil.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::grid::{CellGrid, GridShape, LabelGrid};
use crate::model::{ModelConfig, OctreeModel};
use crate::octree::SchedulePolicy;
use crate::reference::{central_differences, max_relative_error};
use crate::rng::mix;
use crate::train::fit::{instance_gradient, instance_loss, preactivation_margin};
use crate::train::patch::LevelWindow;
use crate::train::Sample;

pub const GRADCHECK_EPS: f64 = 1e-3;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub params: usize,
    pub max_rel_error: f64,
    pub loss: f64,
    /// Smallest |pre-activation| seen in the forward pass.
    pub kink_margin: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

/// The model, sample and window plan used by [`gradcheck`].
pub fn gradcheck_problem(seed: u64, patched: bool) -> Result<(OctreeModel<f64>, Sample<f64>, Vec<Option<LevelWindow>>)> {
    let mut cfg = ModelConfig::new(2, 1, 1);
    cfg.channels = 8;
    cfg.hidden = 16;
    cfg.policy = SchedulePolicy {
        num_levels: 2,
        refine_steps: 4,
        extent_floor: 2,
        ..SchedulePolicy::default()
    };
    let model = OctreeModel::<f64>::new_smooth(cfg, &[8, 8], mix(seed ^ 0x6772_6164))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx, r) = (rng.gen_range(2.0..6.0), rng.gen_range(2.0..6.0), rng.gen_range(1.5..3.0f64));
    let mut img = Vec::with_capacity(64);
    let mut labels = Vec::with_capacity(64);
    for y in 0..8 {
        for x in 0..8 {
            let inside = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r;
            labels.push(u8::from(inside));
            let base = if inside { 0.75 } else { 0.25 };
            img.push(base + rng.gen_range(-0.2..0.2));
        }
    }
    let sample = Sample::new(
        CellGrid::new(GridShape::new(vec![8, 8], 1)?, img, 1)?,
        LabelGrid::new(vec![8, 8], labels)?,
    )?;
    let windows = if patched {
        vec![
            None,
            Some(LevelWindow {
                origin: vec![2, 0],
                size: vec![4, 6],
            }),
        ]
    } else {
        vec![None, None]
    };
    Ok((model, sample, windows))
}

/// Runs the check for one seed.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(seed, false)
}

pub fn gradcheck_with(seed: u64, patched: bool) -> Result<GradcheckReport> {
    let (model, sample, windows) = gradcheck_problem(seed, patched)?;
    let fire_seed = mix(seed);
    let lambda = 1.0;
    let (loss, analytic) = instance_gradient(&model, &sample, &windows, fire_seed, lambda)?;
    let theta = model.flat_params();
    let mut probe = model.clone();
    let numeric = central_differences(&theta, GRADCHECK_EPS, |p| {
        probe.set_flat_params(p).expect("same length");
        instance_loss(&probe, &sample, &windows, fire_seed, lambda).expect("valid problem")
    });
    Ok(GradcheckReport {
        seed,
        params: theta.len(),
        max_rel_error: max_relative_error(&analytic, &numeric, GRADCHECK_FLOOR),
        loss,
        kink_margin: preactivation_margin(&model, &sample, &windows, fire_seed)?,
    })
}
