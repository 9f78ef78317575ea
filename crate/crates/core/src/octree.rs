//! Pyramid schedules and multi-level segmentation.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fused::FusedEngine;
use crate::grid::{avg_downsample, downsampled_dims, nn_upsample, seed_from_image, AxisFactors, CellGrid, GridShape, LabelGrid};
use crate::memory::{BufferKind, MemoryReport, MemoryTracker, Tracked};
use crate::model::OctreeModel;
use crate::reference::{rollout_tracked, RolloutParams};
use crate::scalar::Real;

/// How a schedule is derived from input extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulePolicy {
    pub num_levels: usize,
    /// Coarsest-level steps per cell of the largest coarsest extent.
    pub alpha0: f64,
    pub refine_steps: usize,
    /// An axis is halved only while the halved extent stays at or above this.
    pub extent_floor: usize,
    /// Fixed coarsest-level step count instead of the `alpha0` rule.
    pub coarsest_steps: Option<usize>,
}

impl Default for SchedulePolicy {
    fn default() -> Self {
        Self {
            num_levels: 5,
            alpha0: 1.0,
            refine_steps: 10,
            extent_floor: 5,
            coarsest_steps: None,
        }
    }
}

impl SchedulePolicy {
    pub fn with_levels(num_levels: usize) -> Self {
        Self {
            num_levels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 {
            return Err(invalid("a pyramid needs at least one level"));
        }
        if !(self.alpha0.is_finite() && self.alpha0 > 0.0) {
            return Err(invalid(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        if self.extent_floor == 0 {
            return Err(invalid("extent_floor must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub extents: Vec<usize>,
    /// Factors relating this level to the next finer one; `None` at the finest.
    pub factors: Option<AxisFactors>,
    pub steps: usize,
}

/// Levels ordered coarsest first; the last level has the input extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidSchedule {
    pub levels: Vec<LevelSpec>,
    pub alpha0: f64,
    pub refine_steps: usize,
}

impl PyramidSchedule {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &LevelSpec {
        self.levels.last().expect("schedules are never empty")
    }

    pub fn total_steps(&self) -> usize {
        self.levels.iter().map(|l| l.steps).sum()
    }
}

/// Builds the pyramid for `extents`. Each level halves every axis whose
/// halved extent `ceil(e / 2)` is still at least `extent_floor`; building
/// fails when some level can halve no axis at all.
pub fn build_schedule(extents: &[usize], policy: &SchedulePolicy) -> Result<PyramidSchedule> {
    policy.validate()?;
    GridShape::new(extents.to_vec(), 1)?;
    let mut fine_to_coarse = vec![(extents.to_vec(), None::<AxisFactors>)];
    for level in 1..policy.num_levels {
        let current = &fine_to_coarse.last().expect("non-empty").0;
        let f: Vec<usize> = current
            .iter()
            .map(|&e| if e.div_ceil(2) >= policy.extent_floor { 2 } else { 1 })
            .collect();
        if f.iter().all(|&v| v == 1) {
            return Err(invalid(format!(
                "{} levels are too many for extents {extents:?}: level {level} at {current:?} cannot halve any axis with floor {}",
                policy.num_levels, policy.extent_floor
            )));
        }
        let factors = AxisFactors::new(f)?;
        let coarse = downsampled_dims(current, &factors)?;
        fine_to_coarse.push((coarse, Some(factors)));
    }
    // factors stored on entry i describe entry i-1 -> i; move them to the coarse side
    let n = fine_to_coarse.len();
    let mut levels = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let (ext, _) = &fine_to_coarse[i];
        let factors = if i == 0 { None } else { fine_to_coarse[i].1.clone() };
        let steps = if i == n - 1 {
            policy
                .coarsest_steps
                .unwrap_or_else(|| (policy.alpha0 * *ext.iter().max().expect("rank >= 2") as f64).ceil() as usize)
        } else {
            policy.refine_steps
        };
        levels.push(LevelSpec {
            extents: ext.clone(),
            factors,
            steps,
        });
    }
    Ok(PyramidSchedule {
        levels,
        alpha0: policy.alpha0,
        refine_steps: policy.refine_steps,
    })
}

/// Image pyramid for a schedule, coarsest first.
pub fn build_pyramid<T: Real>(image: &CellGrid<T>, schedule: &PyramidSchedule) -> Result<Vec<CellGrid<T>>> {
    if image.dims() != schedule.finest().extents.as_slice() {
        return Err(invalid(format!(
            "image extents {:?} do not match schedule {:?}",
            image.dims(),
            schedule.finest().extents
        )));
    }
    let mut out = vec![image.clone()];
    for spec in schedule.levels.iter().rev().skip(1) {
        let f = spec.factors.as_ref().expect("coarse levels carry factors");
        let next = avg_downsample(out.last().expect("non-empty"), f)?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// Moves a coarse state to the next finer level: hidden channels are
/// nearest-upsampled, image channels are taken from `fine_image`.
pub fn transfer_state<T: Real>(
    coarse_state: &CellGrid<T>,
    fine_image: &CellGrid<T>,
    factors: &AxisFactors,
) -> Result<CellGrid<T>> {
    let n = coarse_state.image_channels();
    if fine_image.channels() != n {
        return Err(invalid(format!(
            "fine image has {} channels, state expects {n}",
            fine_image.channels()
        )));
    }
    let mut up = nn_upsample(coarse_state, factors, fine_image.dims())?;
    let c = up.channels();
    for (cell, img) in up.data_mut().chunks_exact_mut(c).zip(fine_image.data().chunks_exact(n.max(1))) {
        cell[..n].copy_from_slice(&img[..n]);
    }
    Ok(up)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Reference,
    #[default]
    Fused,
}

impl EngineKind {
    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Reference => "reference",
            EngineKind::Fused => "fused",
        }
    }

    /// Runs one level's rollout on the chosen engine.
    pub fn rollout<T: Real>(
        self,
        state: Tracked<CellGrid<T>>,
        w: &crate::model::NcaWeights<T>,
        params: &RolloutParams,
        tracker: &MemoryTracker,
    ) -> Result<Tracked<CellGrid<T>>> {
        match self {
            EngineKind::Reference => rollout_tracked(state, w, params, tracker),
            EngineKind::Fused => FusedEngine::new(w.dims()).rollout_tracked(state, w, params, tracker),
        }
    }
}

impl FromStr for EngineKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(EngineKind::Reference),
            "fused" => Ok(EngineKind::Fused),
            other => Err(invalid(format!("unknown engine {other:?} (expected fused or reference)"))),
        }
    }
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationResult<T: Real = f32> {
    pub mask: LabelGrid,
    /// The trailing class channels of the finest state.
    pub logits: CellGrid<T>,
    pub schedule: PyramidSchedule,
    pub level_seconds: Vec<f64>,
    pub memory: Option<MemoryReport>,
}

/// Hard labels from class logits: `logit > 0` (sigmoid above one half) for a
/// single class, otherwise the first maximal channel.
pub fn labels_from_logits<T: Real>(logits: &CellGrid<T>) -> LabelGrid {
    let k = logits.channels();
    let labels = logits
        .data()
        .chunks_exact(k)
        .map(|cell| {
            if k == 1 {
                u8::from(cell[0] > T::ZERO)
            } else {
                let mut best = 0;
                for (i, &v) in cell.iter().enumerate().skip(1) {
                    if v > cell[best] {
                        best = i;
                    }
                }
                best as u8
            }
        })
        .collect();
    LabelGrid::new(logits.dims().to_vec(), labels).expect("extents come from a valid grid")
}

/// Copies a channel range out of a grid.
pub fn select_channels<T: Real>(grid: &CellGrid<T>, range: std::ops::Range<usize>) -> Result<CellGrid<T>> {
    let c = grid.channels();
    let k = range.len();
    let shape = GridShape::new(grid.dims().to_vec(), k)?;
    let data = grid
        .data()
        .chunks_exact(c)
        .flat_map(|cell| cell[range.clone()].iter().copied())
        .collect();
    CellGrid::new(shape, data, 0)
}

/// Segments `image` with `model`. The schedule is rebuilt for the image's
/// extents. With a tracker, every state and pyramid buffer is accounted.
pub fn segment<T: Real>(
    image: &CellGrid<T>,
    model: &OctreeModel<T>,
    engine: EngineKind,
    seed: u64,
    tracker: Option<&MemoryTracker>,
) -> Result<SegmentationResult<T>> {
    let cfg = &model.config;
    if image.channels() != cfg.image_channels {
        return Err(invalid(format!(
            "image has {} channels, model expects {}",
            image.channels(),
            cfg.image_channels
        )));
    }
    if image.shape().spatial_rank() != cfg.spatial_rank {
        return Err(invalid(format!(
            "image has {} spatial axes, model expects {}",
            image.shape().spatial_rank(),
            cfg.spatial_rank
        )));
    }
    let schedule = build_schedule(image.dims(), &cfg.policy)?;
    if schedule.num_levels() != model.num_levels() {
        return Err(invalid("model level count disagrees with its schedule policy"));
    }
    let disabled = MemoryTracker::disabled();
    let tr = tracker.unwrap_or(&disabled);
    let mut level_seconds = Vec::with_capacity(schedule.num_levels());
    let final_state = {
        let _run = tr.begin_run(image.cells());
        let pyramid = build_pyramid(image, &schedule)?
            .into_iter()
            .map(|g| tr.track(g, BufferKind::State, "pyramid_image"))
            .collect::<Result<Vec<_>>>()?;
        let mut state: Option<Tracked<CellGrid<T>>> = None;
        for (l, spec) in schedule.levels.iter().enumerate() {
            let start = Instant::now();
            let seeded = match state.take() {
                None => seed_from_image(&pyramid[l], cfg.channels)?,
                Some(prev) => {
                    let f = schedule.levels[l - 1].factors.as_ref().expect("coarse level factors");
                    transfer_state(&prev, &pyramid[l], f)?
                }
            };
            let seeded = tr.track(seeded, BufferKind::State, "level_state")?;
            let params = RolloutParams::new(spec.steps, seed, l as u64, cfg.fire_rate);
            state = Some(engine.rollout(seeded, &model.levels[l], &params, tr)?);
            level_seconds.push(start.elapsed().as_secs_f64());
        }
        drop(pyramid);
        state.expect("at least one level").into_inner()
    };
    let logits = select_channels(&final_state, cfg.logit_channels())?;
    let mask = labels_from_logits(&logits);
    let memory = match tracker {
        Some(t) => Some(t.report()?),
        None => None,
    };
    Ok(SegmentationResult {
        mask,
        logits,
        schedule,
        level_seconds,
        memory,
    })
}
