//! End-to-end training of multi-level models.
//!
//! Forward passes use the layer-wise engine with a tape; gradients flow from
//! the finest-level loss back through every level's rollout, through the
//! window crops (zero padding) and through the nearest-neighbour transfers
//! (summation over replicated cells).

pub mod fit;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod patch;

pub use fit::{evaluate_dice, fit, instance_gradient, save_checkpoint, DiceReport, EpochRecord, TrainOutcome};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use loss::{combined_loss, dice_loss, logits_loss};
pub use optim::{adam_update, ema_update, OptimizerState, TrainConfig};
pub use patch::{sample_patch, LevelWindow, PatchPlan};

use crate::error::{Error, Result};
use crate::grid::{CellGrid, LabelGrid};
use crate::scalar::Real;

/// An image with its ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T: Real = f32> {
    pub image: CellGrid<T>,
    pub mask: LabelGrid,
}

impl<T: Real> Sample<T> {
    pub fn new(image: CellGrid<T>, mask: LabelGrid) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::ExtentMismatch {
                image: image.dims().to_vec(),
                mask: mask.dims().to_vec(),
            });
        }
        Ok(Self { image, mask })
    }
}
