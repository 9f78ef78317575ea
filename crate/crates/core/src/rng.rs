//! Stateless fire gate for the stochastic cell update.
//!
//! Whether a cell applies its additive update at a given step is a pure
//! function of `(seed, level, step, cell)`, so both engines, any worker
//! count, and the finite-difference oracle all see the same masks without
//! sharing generator state.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const CELL_MUL: u64 = 0xBF58_476D_1CE4_E5B9;

/// SplitMix64 finalizer.
#[inline]
pub fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The per-step part of the hash, shared by all cells of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FireDecision {
    key: u64,
    threshold: f32,
}

impl FireDecision {
    pub fn new(seed: u64, level: u64, step: u64, fire_rate: f32) -> Self {
        let key = mix(seed ^ mix(level.wrapping_mul(GOLDEN).wrapping_add(step)));
        Self {
            key,
            threshold: fire_rate,
        }
    }

    /// Uniform draw in `[0, 1)` with 24 bits of resolution.
    #[inline]
    pub fn uniform(&self, cell: usize) -> f32 {
        let h = mix(self.key ^ mix((cell as u64).wrapping_mul(CELL_MUL)));
        (h >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    #[inline]
    pub fn fires(&self, cell: usize) -> bool {
        self.uniform(cell) < self.threshold
    }

    /// Mask for cells `0..cells`.
    pub fn mask(&self, cells: usize) -> Vec<bool> {
        (0..cells).map(|c| self.fires(c)).collect()
    }
}

/// Convenience for one-off lookups.
pub fn fire(seed: u64, level: u64, step: u64, cell: usize, fire_rate: f32) -> bool {
    FireDecision::new(seed, level, step, fire_rate).fires(cell)
}
