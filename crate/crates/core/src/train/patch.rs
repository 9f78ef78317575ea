//! Aligned multi-level training windows.
//!
//! The finest `levels` pyramid levels are trained on windows instead of full
//! grids. The window at a coarser patched level covers exactly the same
//! region: its size is the finer size divided by the level factors and its
//! origin the finer origin divided by them. Finest origins are drawn as
//! multiples of the cumulative factor so the division is exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::LabelGrid;
use crate::octree::PyramidSchedule;

pub const MAX_PATCH_TRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    /// Window extents at the finest level.
    pub finest: Vec<usize>,
    /// How many of the finest levels are patched.
    pub levels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelWindow {
    pub origin: Vec<usize>,
    pub size: Vec<usize>,
}

/// Per-level window sizes (coarsest first, `None` for unpatched levels).
pub fn window_sizes(schedule: &PyramidSchedule, plan: &PatchPlan) -> Result<Vec<Option<Vec<usize>>>> {
    let l = schedule.num_levels();
    if plan.levels > l {
        return Err(invalid(format!("patch plan covers {} levels of {l}", plan.levels)));
    }
    let mut sizes = vec![None; l];
    if plan.levels == 0 {
        return Ok(sizes);
    }
    let finest = &schedule.finest().extents;
    if plan.finest.len() != finest.len() {
        return Err(invalid(format!("patch {:?} has the wrong rank for {finest:?}", plan.finest)));
    }
    let mut size = plan.finest.clone();
    for level in (l - plan.levels..l).rev() {
        let ext = &schedule.levels[level].extents;
        if size.iter().zip(ext).any(|(&s, &e)| s == 0 || s > e) {
            return Err(invalid(format!("patch {size:?} does not fit level extents {ext:?}")));
        }
        sizes[level] = Some(size.clone());
        if level > l - plan.levels {
            let f = schedule.levels[level - 1].factors.as_ref().expect("coarse level factors");
            if size.iter().zip(f.as_slice()).any(|(&s, &fa)| s % fa != 0) {
                return Err(invalid(format!(
                    "patch {size:?} is not divisible by factors {:?}",
                    f.as_slice()
                )));
            }
            size = size.iter().zip(f.as_slice()).map(|(&s, &fa)| s / fa).collect();
        }
    }
    Ok(sizes)
}

/// Draws aligned windows whose finest window contains foreground in `mask`.
pub fn sample_patch<R: Rng>(
    mask: &LabelGrid,
    schedule: &PyramidSchedule,
    plan: &PatchPlan,
    rng: &mut R,
) -> Result<Vec<Option<LevelWindow>>> {
    let sizes = window_sizes(schedule, plan)?;
    let l = schedule.num_levels();
    if mask.dims() != schedule.finest().extents.as_slice() {
        return Err(invalid(format!(
            "mask extents {:?} do not match schedule {:?}",
            mask.dims(),
            schedule.finest().extents
        )));
    }
    if plan.levels == 0 {
        return Ok(vec![None; l]);
    }
    let top = l - plan.levels;
    let rank = mask.dims().len();
    // cumulative factor from level `top` to each finer level
    let mut cum = vec![vec![1usize; rank]; l];
    for level in top + 1..l {
        let f = schedule.levels[level - 1].factors.as_ref().expect("coarse level factors");
        cum[level] = cum[level - 1].iter().zip(f.as_slice()).map(|(a, b)| a * b).collect();
    }
    let top_size = sizes[top].as_ref().expect("patched");
    let top_ext = &schedule.levels[top].extents;
    let fin_size = sizes[l - 1].as_ref().expect("patched");
    let fin_ext = &schedule.levels[l - 1].extents;
    let limit: Vec<usize> = (0..rank)
        .map(|a| (top_ext[a] - top_size[a]).min((fin_ext[a] - fin_size[a]) / cum[l - 1][a]))
        .collect();
    for _ in 0..MAX_PATCH_TRIES {
        let top_origin: Vec<usize> = limit.iter().map(|&m| rng.gen_range(0..=m)).collect();
        let windows: Vec<Option<LevelWindow>> = (0..l)
            .map(|level| {
                sizes[level].as_ref().map(|size| LevelWindow {
                    origin: top_origin.iter().zip(&cum[level]).map(|(o, c)| o * c).collect(),
                    size: size.clone(),
                })
            })
            .collect();
        let fin = windows[l - 1].as_ref().expect("patched");
        if mask.crop(&fin.origin, &fin.size)?.has_foreground() {
            return Ok(windows);
        }
    }
    Err(Error::NoForeground(MAX_PATCH_TRIES))
}
