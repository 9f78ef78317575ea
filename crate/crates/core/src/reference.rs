//! Layer-wise NCA engine, backpropagation through rollouts, and the
//! finite-difference gradient oracle.
//!
//! One step computes each layer over the whole grid before moving on to the
//! next, allocating a full-grid buffer per layer output exactly as a
//! framework implementation would: padded input, convolution, concatenation,
//! linear, ReLU, linear, Bernoulli mask, stochastic update, additive update,
//! and the re-assembled `[image, state]`. Buffers are released as soon as the
//! next layer no longer needs them, and the tracker sees every allocation.
//!
//! Per-cell sums accumulate in ascending index order: perception over kernel
//! taps, the first linear layer starting from its bias over the 2C inputs,
//! the second over the hidden units. The fused engine follows the same order,
//! so the two agree bit for bit.

use crate::error::{invalid, Result};
use crate::grid::{CellGrid, GridShape};
use crate::memory::{BufferKind, MemoryTracker, Tracked};
use crate::model::{kernel_offsets, NcaWeights, WeightDims};
use crate::par::{for_each_chunk_mut, map_chunks, CELL_CHUNK};
use crate::rng::FireDecision;
use crate::scalar::Real;

/// Cells per partial-gradient chunk. Fixed so the reduction order, and
/// therefore the result, does not depend on the worker count.
const GRAD_CHUNK: usize = 256;

/// Which steps of which level a rollout covers and how cells are gated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutParams {
    pub steps: usize,
    pub seed: u64,
    pub level: u64,
    /// Step index of the first step; rollouts can be resumed.
    pub start_step: u64,
    pub fire_rate: f32,
}

impl RolloutParams {
    pub fn new(steps: usize, seed: u64, level: u64, fire_rate: f32) -> Self {
        Self {
            steps,
            seed,
            level,
            start_step: 0,
            fire_rate,
        }
    }

    pub fn fire(&self, step: usize) -> FireDecision {
        FireDecision::new(self.seed, self.level, self.start_step + step as u64, self.fire_rate)
    }
}

/// Intermediates of one training-mode step.
#[derive(Clone, Debug)]
pub struct StepTape<T: Real> {
    /// State the step started from.
    pub input: CellGrid<T>,
    pub mask: Vec<bool>,
    /// Pre-activation of the first linear layer, `cells x hidden`. Entries of
    /// cells that did not fire are unused.
    pub preact: Vec<T>,
}

/// Everything [`backward_rollout`] needs; one entry per step.
#[derive(Clone, Debug)]
pub struct RolloutTape<T: Real> {
    pub steps: Vec<StepTape<T>>,
    pub dims: WeightDims,
}

impl<T: Real> RolloutTape<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Smallest |pre-activation| of the first linear layer over all firing
    /// cells and steps; the distance of the rollout from a ReLU kink.
    pub fn min_abs_preactivation(&self) -> Option<f64> {
        let hid = self.dims.hidden;
        self.steps
            .iter()
            .flat_map(|s| {
                s.mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .flat_map(move |(cell, _)| s.preact[cell * hid..(cell + 1) * hid].iter())
            })
            .map(|z| z.to_f64().abs())
            .reduce(f64::min)
    }

    /// Scalars held by the tape; grows as steps x cells.
    pub fn floats(&self) -> usize {
        self.steps
            .iter()
            .map(|s| s.input.data().len() + s.preact.len() + s.mask.len())
            .sum()
    }
}

struct Geometry {
    dims: [usize; 3],
    offsets: Vec<[isize; 3]>,
}

impl Geometry {
    fn new(shape: &GridShape) -> Self {
        Self {
            dims: shape.dims3(),
            offsets: kernel_offsets(shape.spatial_rank()),
        }
    }

    fn padded_dims(&self, rank: usize) -> [usize; 3] {
        let [h, w, d] = self.dims;
        [h + 2, w + 2, if rank == 3 { d + 2 } else { 1 }]
    }
}

fn check_weights<T: Real>(state: &CellGrid<T>, w: &NcaWeights<T>) -> Result<()> {
    let d = w.dims();
    if state.channels() != d.channels || state.shape().spatial_rank() != d.spatial_rank {
        return Err(invalid(format!(
            "state with {} channels over {} axes does not match weights for {} channels over {} axes",
            state.channels(),
            state.shape().spatial_rank(),
            d.channels,
            d.spatial_rank
        )));
    }
    Ok(())
}

/// Copies channels `[0, n)` out of a grid.
fn image_of<T: Real>(state: &CellGrid<T>) -> Vec<T> {
    let (c, n) = (state.channels(), state.image_channels());
    state
        .data()
        .chunks_exact(c)
        .flat_map(|cell| cell[..n].iter().copied())
        .collect()
}

/// Perception of every cell from a zero-padded copy of the state.
fn perceive<T: Real>(padded: &[T], pdims: [usize; 3], geo: &Geometry, kernel: &[T], c: usize, out: &mut [T]) {
    let [_, w, d] = geo.dims;
    let [_, pw, pd] = pdims;
    let taps = geo.offsets.len();
    let dz = if pdims[2] == 1 { 0 } else { 1 };
    for_each_chunk_mut(out, c * CELL_CHUNK, |ci, chunk| {
        for (k, p) in chunk.chunks_exact_mut(c).enumerate() {
            let cell = ci * CELL_CHUNK + k;
            let (y, x, z) = (cell / (w * d), (cell / d) % w, cell % d);
            p.fill(T::ZERO);
            for (o, off) in geo.offsets.iter().enumerate() {
                let py = (y as isize + 1 + off[0]) as usize;
                let px = (x as isize + 1 + off[1]) as usize;
                let pz = (z as isize + dz + off[2]) as usize;
                let src = &padded[((py * pw + px) * pd + pz) * c..][..c];
                for ch in 0..c {
                    p[ch] += kernel[ch * taps + o] * src[ch];
                }
            }
        }
    });
}

/// Single-cell perception against the unpadded grid, used by the backward
/// pass to recompute what the forward pass discarded.
fn perceive_cell<T: Real>(state: &[T], geo: &Geometry, kernel: &[T], c: usize, cell: usize, p: &mut [T]) {
    let [h, w, d] = geo.dims;
    let (y, x, z) = (cell / (w * d), (cell / d) % w, cell % d);
    let taps = geo.offsets.len();
    p.fill(T::ZERO);
    for (o, off) in geo.offsets.iter().enumerate() {
        let (ny, nx, nz) = (y as isize + off[0], x as isize + off[1], z as isize + off[2]);
        if ny < 0 || nx < 0 || nz < 0 || ny >= h as isize || nx >= w as isize || nz >= d as isize {
            continue;
        }
        let src = &state[((ny as usize * w + nx as usize) * d + nz as usize) * c..][..c];
        for ch in 0..c {
            p[ch] += kernel[ch * taps + o] * src[ch];
        }
    }
}

/// One layer-wise step. `image` holds the clamped channels `[0, n)` of every
/// cell. With a tape, idle cells skip the linear layers (their update is
/// discarded by the mask either way) and the first-layer pre-activations are
/// kept.
fn step_layerwise<T: Real>(
    state: &CellGrid<T>,
    image: &[T],
    w: &NcaWeights<T>,
    mask: &[bool],
    tracker: &MemoryTracker,
    tape: Option<&mut Vec<T>>,
) -> Result<Tracked<CellGrid<T>>> {
    let dims = w.dims();
    let (c, hid, n) = (dims.channels, dims.hidden, state.image_channels());
    let cells = state.cells();
    let geo = Geometry::new(state.shape());
    let training = tape.is_some();

    // input padded by one zero cell on each side of every spatial axis
    let pdims = geo.padded_dims(dims.spatial_rank);
    let mut padded = tracker.alloc::<T>(BufferKind::Intermediate, "input_padded", pdims.iter().product::<usize>() * c)?;
    {
        let [h, wd, d] = geo.dims;
        let [_, pw, pd] = pdims;
        let dz = usize::from(pd > 1);
        for y in 0..h {
            for x in 0..wd {
                let dst = (((y + 1) * pw + x + 1) * pd + dz) * c;
                let src = (y * wd + x) * d * c;
                padded[dst..dst + d * c].copy_from_slice(&state.data()[src..src + d * c]);
            }
        }
    }

    let mut conv = tracker.alloc::<T>(BufferKind::Intermediate, "convolution", cells * c)?;
    perceive(&padded, pdims, &geo, w.conv(), c, &mut conv);
    drop(padded);

    let mut concat = tracker.alloc::<T>(BufferKind::Intermediate, "concat", cells * 2 * c)?;
    for ((dst, s), p) in concat
        .chunks_exact_mut(2 * c)
        .zip(state.data().chunks_exact(c))
        .zip(conv.chunks_exact(c))
    {
        dst[..c].copy_from_slice(s);
        dst[c..].copy_from_slice(p);
    }
    drop(conv);

    let (w1, b1, w2) = (w.w1(), w.b1(), w.w2());
    let mut hidden = tracker.alloc::<T>(BufferKind::Intermediate, "linear_hidden", cells * hid)?;
    for_each_chunk_mut(&mut hidden, hid * CELL_CHUNK, |ci, chunk| {
        for (k, z) in chunk.chunks_exact_mut(hid).enumerate() {
            let cell = ci * CELL_CHUNK + k;
            if training && !mask[cell] {
                continue;
            }
            let v = &concat[cell * 2 * c..(cell + 1) * 2 * c];
            z.copy_from_slice(b1);
            for (i, &vi) in v.iter().enumerate() {
                let row = &w1[i * hid..(i + 1) * hid];
                for (zj, &wij) in z.iter_mut().zip(row) {
                    *zj += vi * wij;
                }
            }
        }
    });
    drop(concat);

    let mut relu = tracker.alloc::<T>(BufferKind::Intermediate, "relu", cells * hid)?;
    for (r, &z) in relu.iter_mut().zip(hidden.iter()) {
        *r = if z > T::ZERO { z } else { T::ZERO };
    }
    match tape {
        Some(t) => *t = hidden.into_inner(),
        None => drop(hidden),
    }

    let mut delta = tracker.alloc::<T>(BufferKind::Intermediate, "linear_out", cells * c)?;
    for_each_chunk_mut(&mut delta, c * CELL_CHUNK, |ci, chunk| {
        for (k, out) in chunk.chunks_exact_mut(c).enumerate() {
            let cell = ci * CELL_CHUNK + k;
            if training && !mask[cell] {
                continue;
            }
            let h = &relu[cell * hid..(cell + 1) * hid];
            for (j, &hj) in h.iter().enumerate() {
                let row = &w2[j * c..(j + 1) * c];
                for (o, &wjc) in out.iter_mut().zip(row) {
                    *o += hj * wjc;
                }
            }
        }
    });
    drop(relu);

    let mut bern = tracker.alloc::<T>(BufferKind::Intermediate, "bernoulli", cells)?;
    for (b, &m) in bern.iter_mut().zip(mask) {
        *b = if m { T::ONE } else { T::ZERO };
    }

    let mut stochastic = tracker.alloc::<T>(BufferKind::Intermediate, "stochastic", cells * c)?;
    for ((s, d), &b) in stochastic
        .chunks_exact_mut(c)
        .zip(delta.chunks_exact(c))
        .zip(bern.iter())
    {
        for (sv, &dv) in s.iter_mut().zip(d) {
            *sv = dv * b;
        }
    }
    drop((delta, bern));

    let mut additive = tracker.alloc::<T>(BufferKind::Intermediate, "additive", cells * c)?;
    for ((a, &s), &u) in additive.iter_mut().zip(state.data()).zip(stochastic.iter()) {
        *a = s + u;
    }
    drop(stochastic);

    let mut next = tracker.alloc::<T>(BufferKind::State, "image_state", cells * c)?;
    for ((dst, a), img) in next
        .chunks_exact_mut(c)
        .zip(additive.chunks_exact(c))
        .zip(image.chunks_exact(n.max(1)))
    {
        dst.copy_from_slice(a);
        dst[..n].copy_from_slice(&img[..n]);
    }
    drop(additive);

    let shape = state.shape().clone();
    Ok(next.map(|data| CellGrid::from_parts(shape, data, n)))
}

/// One NCA step with an explicit fire mask. Channels `[0, n)` of the result
/// are the input's image channels.
pub fn nca_step_reference<T: Real>(state: &CellGrid<T>, w: &NcaWeights<T>, fire_mask: &[bool]) -> Result<CellGrid<T>> {
    check_weights(state, w)?;
    if fire_mask.len() != state.cells() {
        return Err(invalid(format!(
            "fire mask of {} cells for a grid of {} cells",
            fire_mask.len(),
            state.cells()
        )));
    }
    let image = image_of(state);
    Ok(step_layerwise(state, &image, w, fire_mask, &MemoryTracker::disabled(), None)?.into_inner())
}

/// Inference rollout with allocation tracking. Consumes the input state so
/// it is released after the first step.
pub fn rollout_tracked<T: Real>(
    state: Tracked<CellGrid<T>>,
    w: &NcaWeights<T>,
    params: &RolloutParams,
    tracker: &MemoryTracker,
) -> Result<Tracked<CellGrid<T>>> {
    check_weights(&state, w)?;
    let _weights = tracker.lease(BufferKind::Weights, "weights", w.blob().len())?;
    let image = tracker.track(image_of(&state), BufferKind::State, "const_image")?;
    let mut state = state;
    for t in 0..params.steps {
        let mask = params.fire(t).mask(state.cells());
        state = step_layerwise(&state, &image, w, &mask, tracker, None)?;
    }
    Ok(state)
}

/// Runs `params.steps` steps. With `record`, also returns the tape needed by
/// [`backward_rollout`].
pub fn rollout_reference<T: Real>(
    state: CellGrid<T>,
    w: &NcaWeights<T>,
    params: &RolloutParams,
    record: bool,
) -> Result<(CellGrid<T>, Option<RolloutTape<T>>)> {
    check_weights(&state, w)?;
    if !record {
        let out = rollout_tracked(Tracked::untracked(state), w, params, &MemoryTracker::disabled())?;
        return Ok((out.into_inner(), None));
    }
    let tracker = MemoryTracker::disabled();
    let image = image_of(&state);
    let mut tape = RolloutTape {
        steps: Vec::with_capacity(params.steps),
        dims: w.dims(),
    };
    let mut state = state;
    for t in 0..params.steps {
        let mask = params.fire(t).mask(state.cells());
        let mut preact = Vec::new();
        let next = step_layerwise(&state, &image, w, &mask, &tracker, Some(&mut preact))?.into_inner();
        tape.steps.push(StepTape {
            input: std::mem::replace(&mut state, next),
            mask,
            preact,
        });
    }
    Ok((state, Some(tape)))
}

/// Parameter and input-state gradients of one rollout.
#[derive(Clone, Debug)]
pub struct RolloutGradients<T: Real> {
    pub weights: NcaWeights<T>,
    pub input: CellGrid<T>,
}

/// Backpropagates `grad_output` (dL/d final state) through a recorded
/// rollout. Gradients through the clamped image channels are zero; the fire
/// mask acts as a constant multiplier.
pub fn backward_rollout<T: Real>(
    tape: &RolloutTape<T>,
    w: &NcaWeights<T>,
    grad_output: &CellGrid<T>,
) -> Result<RolloutGradients<T>> {
    if w.dims() != tape.dims {
        return Err(invalid("weights do not match the tape's architecture"));
    }
    if let Some(first) = tape.steps.first() {
        if first.input.shape() != grad_output.shape() {
            return Err(invalid(format!(
                "gradient shape {:?} does not match tape shape {:?}",
                grad_output.shape(),
                first.input.shape()
            )));
        }
    }
    if grad_output.channels() != w.dims().channels {
        return Err(invalid("gradient channel count does not match weights"));
    }
    let mut grads = NcaWeights::zeros(w.dims());
    let mut g = grad_output.clone();
    zero_image_channels(&mut g);
    for step in tape.steps.iter().rev() {
        g = backward_step(step, w, &g, &mut grads)?;
    }
    Ok(RolloutGradients { weights: grads, input: g })
}

fn zero_image_channels<T: Real>(g: &mut CellGrid<T>) {
    let (c, n) = (g.channels(), g.image_channels());
    for cell in g.data_mut().chunks_exact_mut(c) {
        cell[..n].fill(T::ZERO);
    }
}

fn add_into<T: Real>(acc: &mut [T], part: &[T]) {
    for (a, &p) in acc.iter_mut().zip(part) {
        *a += p;
    }
}

/// Backward through one step; returns dL/d(step input) and accumulates
/// parameter gradients.
fn backward_step<T: Real>(
    step: &StepTape<T>,
    w: &NcaWeights<T>,
    g_out: &CellGrid<T>,
    grads: &mut NcaWeights<T>,
) -> Result<CellGrid<T>> {
    let dims = w.dims();
    let (c, hid) = (dims.channels, dims.hidden);
    let s = &step.input;
    let n = s.image_channels();
    let cells = s.cells();
    let geo = Geometry::new(s.shape());
    let (w1, w2) = (w.w1(), w.w2());
    let taps = dims.kernel_taps();
    let (go, sd) = (g_out.data(), s.data());

    // Per-cell MLP backward. Each chunk returns partial (w1, b1, w2)
    // gradients plus its slice of dL/ds (direct path) and dL/dp.
    let parts = map_chunks(cells, GRAD_CHUNK, |range| {
        let mut gw1 = vec![T::ZERO; dims.w1_len()];
        let mut gb1 = vec![T::ZERO; hid];
        let mut gw2 = vec![T::ZERO; dims.w2_len()];
        let mut gs = go[range.start * c..range.end * c].to_vec();
        let mut gp = vec![T::ZERO; range.len() * c];
        let mut gdelta = vec![T::ZERO; c];
        let mut gz = vec![T::ZERO; hid];
        let mut v = vec![T::ZERO; 2 * c];
        for (local, cell) in range.clone().enumerate() {
            if !step.mask[cell] {
                continue;
            }
            gdelta.copy_from_slice(&go[cell * c..(cell + 1) * c]);
            gdelta[..n].fill(T::ZERO);
            let z = &step.preact[cell * hid..(cell + 1) * hid];
            // w2 and hidden gradients
            for j in 0..hid {
                let hj = if z[j] > T::ZERO { z[j] } else { T::ZERO };
                let row = &w2[j * c..(j + 1) * c];
                let grow = &mut gw2[j * c..(j + 1) * c];
                let mut gh = T::ZERO;
                for ch in 0..c {
                    grow[ch] += hj * gdelta[ch];
                    gh += row[ch] * gdelta[ch];
                }
                gz[j] = if z[j] > T::ZERO { gh } else { T::ZERO };
            }
            add_into(&mut gb1, &gz);
            v[..c].copy_from_slice(&sd[cell * c..(cell + 1) * c]);
            perceive_cell(sd, &geo, w.conv(), c, cell, &mut v[c..]);
            let gs_cell = &mut gs[local * c..(local + 1) * c];
            let gp_cell = &mut gp[local * c..(local + 1) * c];
            for (i, &vi) in v.iter().enumerate() {
                let row = &w1[i * hid..(i + 1) * hid];
                let grow = &mut gw1[i * hid..(i + 1) * hid];
                let mut gv = T::ZERO;
                for j in 0..hid {
                    grow[j] += vi * gz[j];
                    gv += row[j] * gz[j];
                }
                if i < c {
                    gs_cell[i] += gv;
                } else {
                    gp_cell[i - c] = gv;
                }
            }
        }
        (gw1, gb1, gw2, gs, gp)
    });

    let mut gs = Vec::with_capacity(cells * c);
    let mut gp = Vec::with_capacity(cells * c);
    {
        let g = grads.parts_mut();
        for (gw1, gb1, gw2, s_part, p_part) in parts {
            add_into(g.w1, &gw1);
            add_into(g.b1, &gb1);
            add_into(g.w2, &gw2);
            gs.extend_from_slice(&s_part);
            gp.extend_from_slice(&p_part);
        }
    }

    // Perception backward: kernel gradient by correlation, input gradient by
    // gathering each cell's contributions to its neighbours' perception.
    let [h, wd, d] = geo.dims;
    let coords = |cell: usize| (cell / (wd * d), (cell / d) % wd, cell % d);
    let neighbour = |cell: usize, off: &[isize; 3], sign: isize| -> Option<usize> {
        let (y, x, z) = coords(cell);
        let (ny, nx, nz) = (
            y as isize + sign * off[0],
            x as isize + sign * off[1],
            z as isize + sign * off[2],
        );
        if ny < 0 || nx < 0 || nz < 0 || ny >= h as isize || nx >= wd as isize || nz >= d as isize {
            None
        } else {
            Some((ny as usize * wd + nx as usize) * d + nz as usize)
        }
    };
    let kparts = map_chunks(cells, GRAD_CHUNK, |range| {
        let mut gk = vec![T::ZERO; dims.conv_len()];
        for cell in range {
            let gpc = &gp[cell * c..(cell + 1) * c];
            for (o, off) in geo.offsets.iter().enumerate() {
                if let Some(nb) = neighbour(cell, off, 1) {
                    let src = &sd[nb * c..(nb + 1) * c];
                    for ch in 0..c {
                        gk[ch * taps + o] += gpc[ch] * src[ch];
                    }
                }
            }
        }
        gk
    });
    let kernel = w.conv();
    for_each_chunk_mut(&mut gs, c * CELL_CHUNK, |ci, chunk| {
        for (k, out) in chunk.chunks_exact_mut(c).enumerate() {
            let cell = ci * CELL_CHUNK + k;
            for (o, off) in geo.offsets.iter().enumerate() {
                if let Some(src) = neighbour(cell, off, -1) {
                    let gpc = &gp[src * c..(src + 1) * c];
                    for ch in 0..c {
                        out[ch] += kernel[ch * taps + o] * gpc[ch];
                    }
                }
            }
        }
    });
    let gconv = grads.parts_mut().conv;
    for part in kparts {
        add_into(gconv, &part);
    }

    let mut g_in = CellGrid::from_parts(s.shape().clone(), gs, n);
    zero_image_channels(&mut g_in);
    Ok(g_in)
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every
/// coordinate of `x`.
pub fn central_differences<T: Real>(x: &[T], eps: T, mut f: impl FnMut(&[T]) -> T) -> Vec<T> {
    let mut probe = x.to_vec();
    let two_eps = eps + eps;
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let plus = f(&probe);
            probe[i] = x[i] - eps;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / two_eps
        })
        .collect()
}

/// Finite-difference parameter gradient of `loss(rollout(state))`. Both
/// evaluations of each difference use the same fire masks.
pub fn finite_diff_grad<T: Real>(
    state: &CellGrid<T>,
    w: &NcaWeights<T>,
    params: &RolloutParams,
    loss: impl Fn(&CellGrid<T>) -> T,
    eps: T,
) -> Result<NcaWeights<T>> {
    check_weights(state, w)?;
    let dims = w.dims();
    let blob = central_differences(w.blob(), eps, |theta| {
        let probe = NcaWeights::from_blob(dims, theta.to_vec()).expect("same dims");
        let (out, _) = rollout_reference(state.clone(), &probe, params, false).expect("checked shapes");
        loss(&out)
    });
    NcaWeights::from_blob(dims, blob)
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_relative_error<T: Real>(analytic: &[T], numeric: &[T], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| {
            let (a, b) = (a.to_f64(), b.to_f64());
            (a - b).abs() / a.abs().max(b.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::seed_from_image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid<T: Real>(dims: &[usize], c: usize, n: usize, seed: u64) -> CellGrid<T> {
        let shape = GridShape::new(dims.to_vec(), c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len()).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
        CellGrid::new(shape, data, n).unwrap()
    }

    fn dims(rank: usize, c: usize, h: usize) -> WeightDims {
        WeightDims::new(rank, c, h).unwrap()
    }

    #[test]
    fn zero_last_layer_is_identity() {
        let s = random_grid::<f32>(&[5, 4], 16, 1, 1);
        let w = NcaWeights::init(dims(2, 16, 64), 3);
        let out = nca_step_reference(&s, &w, &vec![true; 20]).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn idle_mask_is_identity() {
        let s = random_grid::<f32>(&[5, 4], 16, 1, 1);
        let w = NcaWeights::init_generic(dims(2, 16, 64), 3);
        let out = nca_step_reference(&s, &w, &vec![false; 20]).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let s = random_grid::<f32>(&[3, 3], 8, 1, 1);
        let w = NcaWeights::init(dims(2, 16, 64), 3);
        assert!(nca_step_reference(&s, &w, &[true; 9]).is_err());
        let w = NcaWeights::init(dims(2, 8, 16), 3);
        assert!(nca_step_reference(&s, &w, &[true; 8]).is_err());
    }

    /// Independent scalar evaluation of one step on a single cell, whose
    /// neighbours are all zero padding.
    fn single_cell_closed_form(s: &[f64], w: &NcaWeights<f64>, n: usize) -> Vec<f64> {
        let d = w.dims();
        let (c, hid, taps) = (d.channels, d.hidden, d.kernel_taps());
        let centre = taps / 2;
        let p: Vec<f64> = (0..c).map(|k| w.conv()[k * taps + centre] * s[k]).collect();
        let v: Vec<f64> = s.iter().chain(&p).copied().collect();
        let h: Vec<f64> = (0..hid)
            .map(|j| {
                let z = w.b1()[j] + (0..2 * c).map(|i| v[i] * w.w1()[i * hid + j]).sum::<f64>();
                z.max(0.0)
            })
            .collect();
        (0..c)
            .map(|k| {
                if k < n {
                    s[k]
                } else {
                    s[k] + (0..hid).map(|j| h[j] * w.w2()[j * c + k]).sum::<f64>()
                }
            })
            .collect()
    }

    #[test]
    fn single_cell_matches_closed_form() {
        for rank in [2, 3] {
            let single = vec![1; rank];
            let s = random_grid::<f64>(&single, 16, 1, 7);
            let w = NcaWeights::<f64>::init_generic(dims(rank, 16, 64), 11);
            let out = nca_step_reference(&s, &w, &[true]).unwrap();
            let expect = single_cell_closed_form(s.data(), &w, 1);
            for (a, b) in out.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rollout_composes_with_shared_step_index() {
        let s = random_grid::<f32>(&[6, 6], 16, 1, 2);
        let w = NcaWeights::init_generic(dims(2, 16, 64), 5);
        let mut p = RolloutParams::new(7, 99, 1, 0.5);
        let (all, _) = rollout_reference(s.clone(), &w, &p, false).unwrap();
        p.steps = 3;
        let (first, _) = rollout_reference(s.clone(), &w, &p, false).unwrap();
        p.steps = 4;
        p.start_step = 3;
        let (second, _) = rollout_reference(first, &w, &p, false).unwrap();
        assert_eq!(all, second);

        let p0 = RolloutParams::new(0, 1, 0, 0.5);
        let (same, tape) = rollout_reference(s.clone(), &w, &p0, true).unwrap();
        assert_eq!(same, s);
        assert!(tape.unwrap().is_empty());
    }

    #[test]
    fn recorded_and_plain_rollouts_agree() {
        let s = random_grid::<f32>(&[5, 7], 16, 2, 3);
        let w = NcaWeights::init_generic(dims(2, 16, 32), 8);
        let p = RolloutParams::new(4, 3, 0, 0.5);
        let (a, _) = rollout_reference(s.clone(), &w, &p, false).unwrap();
        let (b, tape) = rollout_reference(s, &w, &p, true).unwrap();
        assert_eq!(a, b);
        let tape = tape.unwrap();
        assert_eq!(tape.len(), 4);
        assert_eq!(tape.floats(), 4 * (35 * 16 + 35 * 32 + 35));
    }

    #[test]
    fn impulse_stays_within_chebyshev_radius() {
        let (h, wd) = (17, 15);
        let mut s = CellGrid::<f32>::zeros(GridShape::new(vec![h, wd], 16).unwrap(), 1).unwrap();
        let (iy, ix) = (5, 9);
        let base = s.clone();
        let idx = s.index(&[iy, ix]);
        s.cell_mut(idx)[4] = 1.0;
        let w = NcaWeights::init_generic(dims(2, 16, 32), 1);
        for k in 1..=4 {
            let p = RolloutParams::new(k, 3, 0, 1.0);
            let (a, _) = rollout_reference(s.clone(), &w, &p, false).unwrap();
            let (b, _) = rollout_reference(base.clone(), &w, &p, false).unwrap();
            for y in 0..h {
                for x in 0..wd {
                    let cheb = y.abs_diff(iy).max(x.abs_diff(ix));
                    let i = a.index(&[y, x]);
                    if cheb > k {
                        assert_eq!(a.cell(i), b.cell(i), "k={k} at ({y},{x})");
                    }
                }
            }
            // the front does move
            let edge = a.index(&[iy, ix + k]);
            assert_ne!(a.cell(edge), b.cell(edge));
        }
    }

    #[test]
    fn image_channels_survive_rollouts() {
        let img = random_grid::<f32>(&[6, 5], 2, 0, 4);
        let s = seed_from_image(&img, 16).unwrap();
        let w = NcaWeights::init_generic(dims(2, 16, 64), 6);
        let (out, _) = rollout_reference(s, &w, &RolloutParams::new(9, 1, 2, 0.5), false).unwrap();
        for ch in 0..2 {
            let a: Vec<u32> = out.channel(ch).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = img.channel(ch).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tracked_rollout_records_layer_buffers() {
        let s = random_grid::<f32>(&[8, 8], 16, 1, 1);
        let w = NcaWeights::init_generic(dims(2, 16, 64), 2);
        let tracker = MemoryTracker::new();
        {
            let _run = tracker.begin_run(64);
            let st = tracker.track(s, BufferKind::State, "seed").unwrap();
            let out = rollout_tracked(st, &w, &RolloutParams::new(2, 1, 0, 0.5), &tracker).unwrap();
            drop(out);
        }
        let r = tracker.report().unwrap();
        // input + image + hidden pre-activation + relu
        assert_eq!(r.peak_persistent_floats, 64 * (16 + 1 + 64 + 64) + w.blob().len());
        assert_eq!(r.peak_transient_floats_per_cell, 128);
        assert_eq!(tracker.live_floats(), 0);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let s = random_grid::<f64>(&[4, 4], 8, 1, 1);
        let w = NcaWeights::<f64>::init_generic(dims(2, 8, 16), 2);
        let (_, tape) = rollout_reference(s.clone(), &w, &RolloutParams::new(3, 1, 0, 0.5), true).unwrap();
        let g = CellGrid::zeros(s.shape().clone(), 1).unwrap();
        let r = backward_rollout(&tape.unwrap(), &w, &g).unwrap();
        assert!(r.weights.blob().iter().all(|&v| v == 0.0));
        assert!(r.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_gradient_matches_hand_chain_rule() {
        // L = sum_k g_k * out_k for one cell, one step, always firing.
        let s = random_grid::<f64>(&[1, 1], 4, 1, 3);
        let w = NcaWeights::<f64>::init_generic(dims(2, 4, 6), 4);
        let gk: Vec<f64> = vec![0.3, -0.7, 1.1, 0.5];
        let (_, tape) = rollout_reference(s.clone(), &w, &RolloutParams::new(1, 0, 0, 1.0), true).unwrap();
        let g = CellGrid::new(s.shape().clone(), gk.clone(), 1).unwrap();
        let r = backward_rollout(&tape.unwrap(), &w, &g).unwrap();

        let (c, hid, taps) = (4, 6, 9);
        let sv = s.data();
        let p: Vec<f64> = (0..c).map(|k| w.conv()[k * taps + 4] * sv[k]).collect();
        let v: Vec<f64> = sv.iter().chain(&p).copied().collect();
        let z: Vec<f64> = (0..hid)
            .map(|j| w.b1()[j] + (0..2 * c).map(|i| v[i] * w.w1()[i * hid + j]).sum::<f64>())
            .collect();
        // channel 0 is the image: its upstream gradient is dropped
        let gd: Vec<f64> = (0..c).map(|k| if k == 0 { 0.0 } else { gk[k] }).collect();
        for j in 0..hid {
            for k in 0..c {
                let expect = z[j].max(0.0) * gd[k];
                assert!((r.weights.w2()[j * c + k] - expect).abs() < 1e-12);
            }
        }
        let gz: Vec<f64> = (0..hid)
            .map(|j| {
                let gh: f64 = (0..c).map(|k| w.w2()[j * c + k] * gd[k]).sum();
                if z[j] > 0.0 { gh } else { 0.0 }
            })
            .collect();
        for j in 0..hid {
            assert!((r.weights.b1()[j] - gz[j]).abs() < 1e-12);
            for i in 0..2 * c {
                assert!((r.weights.w1()[i * hid + j] - v[i] * gz[j]).abs() < 1e-12);
            }
        }
        for k in 0..c {
            let gp: f64 = (0..hid).map(|j| w.w1()[(c + k) * hid + j] * gz[j]).sum();
            for o in 0..taps {
                let expect = if o == 4 { gp * sv[k] } else { 0.0 };
                assert!((r.weights.conv()[k * taps + o] - expect).abs() < 1e-12);
            }
        }
    }

    fn square_loss(target: &CellGrid<f64>) -> impl Fn(&CellGrid<f64>) -> f64 + '_ {
        move |out| {
            out.data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| 0.5 * (a - b) * (a - b))
                .sum()
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for (rank, ext) in [(2usize, vec![4usize, 5]), (3, vec![3, 3, 2])] {
            for seed in 0..3u64 {
                let s = random_grid::<f64>(&ext, 6, 1, seed);
                let target = random_grid::<f64>(&ext, 6, 1, seed + 100);
                let w = NcaWeights::<f64>::init_smooth(dims(rank, 6, 8), seed + 7);
                let p = RolloutParams::new(3, seed, 0, 0.5);
                let (out, tape) = rollout_reference(s.clone(), &w, &p, true).unwrap();
                assert!(tape.as_ref().unwrap().min_abs_preactivation().unwrap() > 0.1);
                let mut g = out.clone();
                for (gv, (&o, &t)) in g.data_mut().iter_mut().zip(out.data().iter().zip(target.data())) {
                    *gv = o - t;
                }
                let r = backward_rollout(&tape.unwrap(), &w, &g).unwrap();
                let fd = finite_diff_grad(&s, &w, &p, square_loss(&target), 1e-3).unwrap();
                let err = max_relative_error(r.weights.blob(), fd.blob(), 1e-6);
                assert!(err <= 1e-3, "rank {rank} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let s = random_grid::<f64>(&[4, 4], 6, 1, 9);
        let target = random_grid::<f64>(&[4, 4], 6, 1, 19);
        let w = NcaWeights::<f64>::init_generic(dims(2, 6, 8), 29);
        let p = RolloutParams::new(2, 5, 0, 0.5);
        let (out, tape) = rollout_reference(s.clone(), &w, &p, true).unwrap();
        let mut g = out.clone();
        for (gv, (&o, &t)) in g.data_mut().iter_mut().zip(out.data().iter().zip(target.data())) {
            *gv = o - t;
        }
        let r = backward_rollout(&tape.unwrap(), &w, &g).unwrap();
        let loss = square_loss(&target);
        let fd = central_differences(s.data(), 1e-4, |x| {
            let probe = CellGrid::new(s.shape().clone(), x.to_vec(), 1).unwrap();
            loss(&rollout_reference(probe, &w, &p, false).unwrap().0)
        });
        // image channel gradients are defined as zero; compare the rest
        for cell in 0..16 {
            assert_eq!(r.input.cell(cell)[0], 0.0);
            for ch in 1..6 {
                let (a, b) = (r.input.cell(cell)[ch], fd[cell * 6 + ch]);
                assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn no_conv_signal_without_last_layer() {
        let s = random_grid::<f64>(&[4, 4], 6, 1, 1);
        let w = NcaWeights::<f64>::init(dims(2, 6, 8), 2);
        let p = RolloutParams::new(3, 1, 0, 0.5);
        let fd = finite_diff_grad(&s, &w, &p, |o| o.data().iter().map(|v| v * v).sum(), 1e-3).unwrap();
        assert!(fd.conv().iter().all(|&v| v.abs() < 1e-9));
        let (_, tape) = rollout_reference(s.clone(), &w, &p, true).unwrap();
        let mut g = s.clone();
        g.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let r = backward_rollout(&tape.unwrap(), &w, &g).unwrap();
        assert!(r.weights.conv().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn central_differences_exact_on_quadratics() {
        let x = [0.3f64, -1.2, 2.5];
        let f = |v: &[f64]| 2.0 * v[0] * v[0] + 3.0 * v[1] * v[2] - v[2];
        let g = central_differences(&x, 1e-3, f);
        let expect = [4.0 * x[0], 3.0 * x[2], 3.0 * x[1] - 1.0];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tape_mismatch_rejected() {
        let s = random_grid::<f64>(&[4, 4], 6, 1, 1);
        let w = NcaWeights::<f64>::init_generic(dims(2, 6, 8), 2);
        let (_, tape) = rollout_reference(s, &w, &RolloutParams::new(1, 1, 0, 0.5), true).unwrap();
        let g = random_grid::<f64>(&[4, 3], 6, 1, 1);
        assert!(backward_rollout(tape.as_ref().unwrap(), &w, &g).is_err());
        let w2 = NcaWeights::<f64>::init_generic(dims(2, 6, 4), 2);
        let g = random_grid::<f64>(&[4, 4], 6, 1, 1);
        assert!(backward_rollout(tape.as_ref().unwrap(), &w2, &g).is_err());
    }
}
