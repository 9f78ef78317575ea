//! Cell-oriented inference.
//!
//! A step reads the front buffer and writes the back buffer; each cell runs
//! perception, both linear layers, the gated update and the image clamp in
//! one pass, keeping its `2C + hidden` intermediates in a per-worker scratch
//! slice. Only the two state buffers and the weights are grid-scale.

use crate::error::{invalid, Result};
use crate::grid::CellGrid;
use crate::memory::{BufferKind, MemoryTracker, Tracked};
use crate::model::{kernel_offsets, NcaWeights, WeightDims};
use crate::par::{for_each_chunk_mut_init, CELL_CHUNK};
use crate::reference::RolloutParams;
use crate::rng::FireDecision;
use crate::scalar::Real;

/// Front (read) and back (write) state grids of identical shape.
#[derive(Clone, Debug)]
pub struct DoubleBuffer<T: Real = f32> {
    pub front: CellGrid<T>,
    pub back: CellGrid<T>,
}

impl<T: Real> DoubleBuffer<T> {
    pub fn new(front: CellGrid<T>) -> Self {
        let back = front.clone();
        Self { front, back }
    }

    pub fn swap(&mut self) {
        std::mem::swap(&mut self.front, &mut self.back);
    }
}

/// Inference engine configured for one `(channels, hidden)` pair.
///
/// The default 16/64 architecture gets a path where both sizes are compile
/// time constants; other sizes share the same kernel with runtime bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusedEngine {
    dims: WeightDims,
}

struct Geometry {
    dims: [usize; 3],
    offsets: Vec<[isize; 3]>,
}

impl FusedEngine {
    pub fn new(dims: WeightDims) -> Self {
        Self { dims }
    }

    pub fn dims(&self) -> WeightDims {
        self.dims
    }

    pub fn is_specialized(&self) -> bool {
        (self.dims.channels, self.dims.hidden) == (16, 64)
    }

    /// Floats of per-worker scratch: `2C + hidden`.
    pub fn scratch_floats(&self) -> usize {
        self.dims.cell_working_set()
    }

    fn check<T: Real>(&self, state: &CellGrid<T>, w: &NcaWeights<T>) -> Result<()> {
        if w.dims() != self.dims {
            return Err(invalid(format!(
                "engine built for {:?} given weights for {:?}",
                self.dims,
                w.dims()
            )));
        }
        if state.channels() != self.dims.channels || state.shape().spatial_rank() != self.dims.spatial_rank {
            return Err(invalid(format!(
                "state with {} channels over {} axes does not fit engine {:?}",
                state.channels(),
                state.shape().spatial_rank(),
                self.dims
            )));
        }
        Ok(())
    }

    /// Computes one step from `buffers.front` into `buffers.back`.
    pub fn step<T: Real>(&self, buffers: &mut DoubleBuffer<T>, w: &NcaWeights<T>, fire: &FireDecision) -> Result<()> {
        self.step_into(&buffers.front, &mut buffers.back, w, fire)
    }

    fn step_into<T: Real>(
        &self,
        front: &CellGrid<T>,
        back: &mut CellGrid<T>,
        w: &NcaWeights<T>,
        fire: &FireDecision,
    ) -> Result<()> {
        self.check(front, w)?;
        if back.shape() != front.shape() {
            return Err(invalid("front and back buffers differ in shape"));
        }
        let geo = Geometry {
            dims: front.shape().dims3(),
            offsets: kernel_offsets(self.dims.spatial_rank),
        };
        let n = front.image_channels();
        back.set_image_channels(n)?;
        if self.is_specialized() {
            step_cells::<T, 16, 64>(front.data(), back.data_mut(), &geo, w, fire, n, 16, 64);
        } else {
            let (c, h) = (self.dims.channels, self.dims.hidden);
            step_cells::<T, 0, 0>(front.data(), back.data_mut(), &geo, w, fire, n, c, h);
        }
        Ok(())
    }

    /// Runs `params.steps` steps and returns the final state.
    pub fn rollout<T: Real>(&self, state: CellGrid<T>, w: &NcaWeights<T>, params: &RolloutParams) -> Result<CellGrid<T>> {
        Ok(self
            .rollout_tracked(Tracked::untracked(state), w, params, &MemoryTracker::disabled())?
            .into_inner())
    }

    /// Rollout with allocation accounting. The input grid becomes the first
    /// front buffer, so at most two state grids are ever live.
    pub fn rollout_tracked<T: Real>(
        &self,
        state: Tracked<CellGrid<T>>,
        w: &NcaWeights<T>,
        params: &RolloutParams,
        tracker: &MemoryTracker,
    ) -> Result<Tracked<CellGrid<T>>> {
        self.check(&state, w)?;
        if params.steps == 0 {
            return Ok(state);
        }
        let _weights = tracker.lease(BufferKind::Weights, "weights", w.blob().len())?;
        let _scratch = tracker.lease(BufferKind::Scratch, "cell_scratch", self.scratch_floats())?;
        let mut back = tracker.track(state.clone(), BufferKind::State, "back_buffer")?;
        let mut front = state;
        for t in 0..params.steps {
            self.step_into(&front, &mut back, w, &params.fire(t))?;
            std::mem::swap(&mut front, &mut back);
        }
        Ok(front)
    }
}

#[allow(clippy::too_many_arguments)]
fn step_cells<T: Real, const C: usize, const H: usize>(
    front: &[T],
    back: &mut [T],
    geo: &Geometry,
    w: &NcaWeights<T>,
    fire: &FireDecision,
    n: usize,
    c_rt: usize,
    h_rt: usize,
) {
    let (c, hid) = if C > 0 { (C, H) } else { (c_rt, h_rt) };
    for_each_chunk_mut_init(
        back,
        c * CELL_CHUNK,
        || vec![T::ZERO; 2 * c + hid],
        |scratch, ci, chunk| {
            for (k, out) in chunk.chunks_exact_mut(c).enumerate() {
                let cell = ci * CELL_CHUNK + k;
                let s = &front[cell * c..(cell + 1) * c];
                if !fire.fires(cell) {
                    out.copy_from_slice(s);
                    continue;
                }
                cell_update(front, geo, w, cell, c, hid, scratch, out);
                out[..n].copy_from_slice(&s[..n]);
            }
        },
    );
}

/// Full update of one firing cell into `out`. `scratch` holds
/// `[state | perception | hidden]`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn cell_update<T: Real>(
    front: &[T],
    geo: &Geometry,
    w: &NcaWeights<T>,
    cell: usize,
    c: usize,
    hid: usize,
    scratch: &mut [T],
    out: &mut [T],
) {
    let [h, wd, d] = geo.dims;
    let (y, x, z) = (cell / (wd * d), (cell / d) % wd, cell % d);
    let (v, hbuf) = scratch.split_at_mut(2 * c);
    let (sv, p) = v.split_at_mut(c);
    sv.copy_from_slice(&front[cell * c..(cell + 1) * c]);

    let kernel = w.conv();
    let taps = geo.offsets.len();
    p.fill(T::ZERO);
    for (o, off) in geo.offsets.iter().enumerate() {
        let (ny, nx, nz) = (y as isize + off[0], x as isize + off[1], z as isize + off[2]);
        if ny < 0 || nx < 0 || nz < 0 || ny >= h as isize || nx >= wd as isize || nz >= d as isize {
            continue;
        }
        let src = &front[((ny as usize * wd + nx as usize) * d + nz as usize) * c..][..c];
        for ch in 0..c {
            p[ch] += kernel[ch * taps + o] * src[ch];
        }
    }

    let (w1, w2) = (w.w1(), w.w2());
    hbuf.copy_from_slice(w.b1());
    for (i, &vi) in v.iter().enumerate() {
        let row = &w1[i * hid..(i + 1) * hid];
        for (zj, &wij) in hbuf.iter_mut().zip(row) {
            *zj += vi * wij;
        }
    }
    for zj in hbuf.iter_mut() {
        if !(*zj > T::ZERO) {
            *zj = T::ZERO;
        }
    }

    out.fill(T::ZERO);
    for (j, &hj) in hbuf.iter().enumerate() {
        let row = &w2[j * c..(j + 1) * c];
        for (o, &wjc) in out.iter_mut().zip(row) {
            *o += hj * wjc;
        }
    }
    for (o, &s) in out.iter_mut().zip(v[..c].iter()) {
        *o = s + *o;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;
    use crate::par::with_workers;
    use crate::reference::{nca_step_reference, rollout_reference};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(dims: &[usize], c: usize, n: usize, seed: u64) -> CellGrid {
        let shape = GridShape::new(dims.to_vec(), c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        CellGrid::new(shape, data, n).unwrap()
    }

    fn bits(g: &CellGrid) -> Vec<u32> {
        g.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn single_step_matches_reference_bitwise() {
        for (rank, ext) in [(2, vec![9, 7]), (3, vec![5, 4, 3])] {
            for (c, h) in [(16, 64), (8, 24)] {
                let dims = WeightDims::new(rank, c, h).unwrap();
                let w = NcaWeights::init_generic(dims, 3);
                let s = random_grid(&ext, c, 1, 4);
                let fire = FireDecision::new(1, 0, 0, 0.5);
                let expect = nca_step_reference(&s, &w, &fire.mask(s.cells())).unwrap();
                let mut buf = DoubleBuffer::new(s);
                FusedEngine::new(dims).step(&mut buf, &w, &fire).unwrap();
                assert_eq!(bits(&buf.back), bits(&expect));
            }
        }
    }

    #[test]
    fn rollout_matches_reference_and_ignores_worker_count() {
        let dims = WeightDims::new(3, 16, 64).unwrap();
        let w = NcaWeights::init_generic(dims, 8);
        let s = random_grid(&[12, 10, 4], 16, 1, 9);
        let p = RolloutParams::new(12, 77, 2, 0.5);
        let (expect, _) = rollout_reference(s.clone(), &w, &p, false).unwrap();
        let engine = FusedEngine::new(dims);
        for workers in [1, 2, 8] {
            let out = with_workers(workers, || engine.rollout(s.clone(), &w, &p).unwrap());
            assert_eq!(bits(&out), bits(&expect), "workers {workers}");
        }
    }

    #[test]
    fn zero_last_layer_copies_front() {
        let dims = WeightDims::new(2, 16, 64).unwrap();
        let w = NcaWeights::init(dims, 1);
        let s = random_grid(&[6, 6], 16, 1, 2);
        let mut buf = DoubleBuffer::new(s.clone());
        buf.back.data_mut().fill(5.0);
        FusedEngine::new(dims).step(&mut buf, &w, &FireDecision::new(0, 0, 0, 1.0)).unwrap();
        assert_eq!(buf.back, s);
        let out = FusedEngine::new(dims).rollout(s.clone(), &w, &RolloutParams::new(0, 1, 0, 0.5)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let engine = FusedEngine::new(WeightDims::new(2, 16, 64).unwrap());
        let w = NcaWeights::init(WeightDims::new(2, 16, 32).unwrap(), 1);
        let s = random_grid(&[4, 4], 16, 1, 1);
        assert!(engine.rollout(s.clone(), &w, &RolloutParams::new(1, 0, 0, 0.5)).is_err());
        let w = NcaWeights::init(WeightDims::new(2, 16, 64).unwrap(), 1);
        let s3 = random_grid(&[4, 4, 2], 16, 1, 1);
        assert!(engine.rollout(s3, &w, &RolloutParams::new(1, 0, 0, 0.5)).is_err());
    }

    fn measure(engine: &FusedEngine, w: &NcaWeights, side: usize, steps: usize) -> crate::memory::MemoryReport {
        let tracker = MemoryTracker::new();
        {
            let _run = tracker.begin_run(side * side);
            let s = CellGrid::zeros(GridShape::new(vec![side, side], 16).unwrap(), 1).unwrap();
            let s = tracker.track(s, BufferKind::State, "input").unwrap();
            drop(engine.rollout_tracked(s, w, &RolloutParams::new(steps, 1, 0, 0.5), &tracker).unwrap());
        }
        tracker.report().unwrap()
    }

    #[test]
    fn memory_is_two_grids_regardless_of_steps() {
        let dims = WeightDims::new(2, 16, 64).unwrap();
        let engine = FusedEngine::new(dims);
        let w = NcaWeights::init_generic(dims, 1);
        let a = measure(&engine, &w, 32, 3);
        let b = measure(&engine, &w, 32, 30);
        assert_eq!(a.peak_persistent_floats, b.peak_persistent_floats);
        assert_eq!(a.peak_persistent_floats, 2 * 16 * 1024 + dims.param_count());
        assert_eq!(a.peak_transient_floats_per_cell, 96);
        assert_eq!(a.peak_intermediate_floats, 0);
    }
}
