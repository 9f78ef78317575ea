//! Dense multi-channel cell grids and the resampling primitives the octree
//! pyramid is built from.
//!
//! Layout is row-major over the spatial axes `(H, W[, D])` with the channel
//! axis innermost, so all channels of one cell are contiguous.

use crate::error::{invalid, Result};
use crate::par::{for_each_chunk_mut, CELL_CHUNK};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct GridShape {
    dims: Vec<usize>,
    channels: usize,
}

impl GridShape {
    pub fn new(dims: impl Into<Vec<usize>>, channels: usize) -> Result<Self> {
        let dims = dims.into();
        if !(2..=3).contains(&dims.len()) {
            return Err(invalid(format!(
                "grid must have 2 or 3 spatial axes, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&e| e == 0) {
            return Err(invalid(format!("zero extent in {dims:?}")));
        }
        if channels == 0 {
            return Err(invalid("grid needs at least one channel"));
        }
        Ok(Self { dims, channels })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial_rank(&self) -> usize {
        self.dims.len()
    }

    pub fn cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.cells() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Extents padded to three axes (2D grids get a trailing unit axis).
    pub fn dims3(&self) -> [usize; 3] {
        pad3(&self.dims, 1)
    }

    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        Self::new(self.dims.clone(), channels)
    }
}

pub(crate) fn pad3(v: &[usize], fill: usize) -> [usize; 3] {
    [v[0], v[1], v.get(2).copied().unwrap_or(fill)]
}

/// Per-axis downsampling factors, each 1 or 2.
#[derive(Clone, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct AxisFactors(Vec<usize>);

impl AxisFactors {
    pub fn new(factors: impl Into<Vec<usize>>) -> Result<Self> {
        let factors = factors.into();
        if !(2..=3).contains(&factors.len()) {
            return Err(invalid(format!("need 2 or 3 axis factors, got {factors:?}")));
        }
        if factors.iter().any(|f| !(1..=2).contains(f)) {
            return Err(invalid(format!("axis factors must be 1 or 2, got {factors:?}")));
        }
        Ok(Self(factors))
    }

    pub fn uniform(rank: usize, factor: usize) -> Result<Self> {
        Self::new(vec![factor; rank])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn volume(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().all(|&f| f == 1)
    }

    pub(crate) fn f3(&self) -> [usize; 3] {
        pad3(&self.0, 1)
    }
}

impl TryFrom<Vec<usize>> for AxisFactors {
    type Error = crate::Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AxisFactors> for Vec<usize> {
    fn from(f: AxisFactors) -> Self {
        f.0
    }
}

/// A dense grid of `C`-channel cells. The first `image_channels` channels
/// hold the (clamped) input image.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGrid<T: Real = f32> {
    shape: GridShape,
    data: Vec<T>,
    image_channels: usize,
}

impl<T: Real> CellGrid<T> {
    pub fn new(shape: GridShape, data: Vec<T>, image_channels: usize) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(invalid(format!(
                "data length {} does not match shape {:?}x{} = {}",
                data.len(),
                shape.dims(),
                shape.channels(),
                shape.len()
            )));
        }
        if image_channels > shape.channels() {
            return Err(invalid(format!(
                "image_channels {image_channels} exceeds channels {}",
                shape.channels()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("grid data contains non-finite values"));
        }
        Ok(Self {
            shape,
            data,
            image_channels,
        })
    }

    /// Builds a grid without the finiteness scan. Callers guarantee the
    /// length invariant.
    pub(crate) fn from_parts(shape: GridShape, data: Vec<T>, image_channels: usize) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        debug_assert!(image_channels <= shape.channels());
        Self {
            shape,
            data,
            image_channels,
        }
    }

    pub fn zeros(shape: GridShape, image_channels: usize) -> Result<Self> {
        let data = vec![T::ZERO; shape.len()];
        Self::new(shape, data, image_channels)
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn channels(&self) -> usize {
        self.shape.channels()
    }

    pub fn cells(&self) -> usize {
        self.shape.cells()
    }

    pub fn image_channels(&self) -> usize {
        self.image_channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn cell(&self, index: usize) -> &[T] {
        let c = self.channels();
        &self.data[index * c..(index + 1) * c]
    }

    pub fn cell_mut(&mut self, index: usize) -> &mut [T] {
        let c = self.channels();
        &mut self.data[index * c..(index + 1) * c]
    }

    /// Linear cell index of spatial coordinates.
    pub fn index(&self, coords: &[usize]) -> usize {
        let [_, w, d] = self.shape.dims3();
        let c = pad3(coords, 0);
        (c[0] * w + c[1]) * d + c[2]
    }

    pub fn get(&self, coords: &[usize], channel: usize) -> T {
        self.data[self.index(coords) * self.channels() + channel]
    }

    /// One channel as a flat per-cell vector.
    pub fn channel(&self, channel: usize) -> Vec<T> {
        self.data
            .iter()
            .skip(channel)
            .step_by(self.channels())
            .copied()
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn set_image_channels(&mut self, n: usize) -> Result<()> {
        if n > self.channels() {
            return Err(invalid(format!(
                "image_channels {n} exceeds channels {}",
                self.channels()
            )));
        }
        self.image_channels = n;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> CellGrid<U> {
        CellGrid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            image_channels: self.image_channels,
        }
    }
}

/// Places a `n`-channel image into the first `n` channels of a fresh
/// `total_channels`-channel grid; the remaining channels are zero.
pub fn seed_from_image<T: Real>(image: &CellGrid<T>, total_channels: usize) -> Result<CellGrid<T>> {
    let n = image.channels();
    if total_channels < n {
        return Err(invalid(format!(
            "total_channels {total_channels} is smaller than the image's {n} channels"
        )));
    }
    let shape = image.shape().with_channels(total_channels)?;
    let mut data = vec![T::ZERO; shape.len()];
    for (dst, src) in data
        .chunks_exact_mut(total_channels)
        .zip(image.data().chunks_exact(n))
    {
        dst[..n].copy_from_slice(src);
    }
    Ok(CellGrid::from_parts(shape, data, n))
}

/// Output extents of a downsample: `ceil(extent / factor)` per axis.
pub fn downsampled_dims(dims: &[usize], factors: &AxisFactors) -> Result<Vec<usize>> {
    if dims.len() != factors.as_slice().len() {
        return Err(invalid(format!(
            "factor rank {} does not match grid rank {}",
            factors.as_slice().len(),
            dims.len()
        )));
    }
    Ok(dims
        .iter()
        .zip(factors.as_slice())
        .map(|(e, f)| e.div_ceil(*f))
        .collect())
}

/// Mean-pools each `factors` block. Odd extents are padded by replicating the
/// last row/column/slice before averaging.
pub fn avg_downsample<T: Real>(grid: &CellGrid<T>, factors: &AxisFactors) -> Result<CellGrid<T>> {
    let out_dims = downsampled_dims(grid.dims(), factors)?;
    if factors.is_identity() {
        return Ok(grid.clone());
    }
    let c = grid.channels();
    let shape = GridShape::new(out_dims, c)?;
    let [_, ow, od] = shape.dims3();
    let [ih, iw, id] = grid.shape().dims3();
    let [fh, fw, fd] = factors.f3();
    let inv = T::ONE / T::from_f64(factors.volume() as f64);
    let src = grid.data();
    let mut data = vec![T::ZERO; shape.len()];
    for_each_chunk_mut(&mut data, c * CELL_CHUNK, |chunk_idx, chunk| {
        for (k, out) in chunk.chunks_exact_mut(c).enumerate() {
            let cell = chunk_idx * CELL_CHUNK + k;
            let (y, x, z) = (cell / (ow * od), (cell / od) % ow, cell % od);
            // deviations from the block's first cell, so constant blocks stay exact
            let first = &src[(((y * fh).min(ih - 1) * iw + (x * fw).min(iw - 1)) * id + (z * fd).min(id - 1)) * c..][..c];
            for a in 0..fh {
                let sy = (y * fh + a).min(ih - 1);
                for b in 0..fw {
                    let sx = (x * fw + b).min(iw - 1);
                    for e in 0..fd {
                        let sz = (z * fd + e).min(id - 1);
                        let s = ((sy * iw + sx) * id + sz) * c;
                        for ((o, v), f0) in out.iter_mut().zip(&src[s..s + c]).zip(first) {
                            *o += *v - *f0;
                        }
                    }
                }
            }
            for (o, f0) in out.iter_mut().zip(first) {
                *o = *f0 + *o * inv;
            }
        }
    });
    Ok(CellGrid::from_parts(shape, data, grid.image_channels()))
}

fn check_upsample_target(dims: &[usize], factors: &AxisFactors, target: &[usize]) -> Result<()> {
    if dims.len() != target.len() || dims.len() != factors.as_slice().len() {
        return Err(invalid(format!(
            "rank mismatch: grid {dims:?}, factors {:?}, target {target:?}",
            factors.as_slice()
        )));
    }
    for ((&e, &f), &t) in dims.iter().zip(factors.as_slice()).zip(target) {
        if t > e * f || t + f < e * f + 1 {
            return Err(invalid(format!(
                "target {target:?} inconsistent with extents {dims:?} under factors {:?}",
                factors.as_slice()
            )));
        }
    }
    Ok(())
}

/// Nearest-neighbour upsampling: output cell `i` copies source cell
/// `floor(i / factor)` per axis.
pub fn nn_upsample<T: Real>(
    grid: &CellGrid<T>,
    factors: &AxisFactors,
    target_dims: &[usize],
) -> Result<CellGrid<T>> {
    check_upsample_target(grid.dims(), factors, target_dims)?;
    let c = grid.channels();
    let shape = GridShape::new(target_dims.to_vec(), c)?;
    let [_, ow, od] = shape.dims3();
    let [_, iw, id] = grid.shape().dims3();
    let [fh, fw, fd] = factors.f3();
    let src = grid.data();
    let mut data = vec![T::ZERO; shape.len()];
    for_each_chunk_mut(&mut data, c * CELL_CHUNK, |chunk_idx, chunk| {
        for (k, out) in chunk.chunks_exact_mut(c).enumerate() {
            let cell = chunk_idx * CELL_CHUNK + k;
            let (y, x, z) = (cell / (ow * od), (cell / od) % ow, cell % od);
            let s = (((y / fh) * iw + x / fw) * id + z / fd) * c;
            out.copy_from_slice(&src[s..s + c]);
        }
    });
    Ok(CellGrid::from_parts(shape, data, grid.image_channels()))
}

/// Adjoint of [`nn_upsample`]: every fine cell's value is summed into the
/// coarse cell it was copied from.
pub fn nn_upsample_adjoint<T: Real>(
    fine: &CellGrid<T>,
    factors: &AxisFactors,
    coarse_dims: &[usize],
) -> Result<CellGrid<T>> {
    check_upsample_target(coarse_dims, factors, fine.dims())?;
    let c = fine.channels();
    let shape = GridShape::new(coarse_dims.to_vec(), c)?;
    let [_, cw, cd] = shape.dims3();
    let [fh_ext, fw_ext, fd_ext] = fine.shape().dims3();
    let [fh, fw, fd] = factors.f3();
    let src = fine.data();
    let mut data = vec![T::ZERO; shape.len()];
    for_each_chunk_mut(&mut data, c * CELL_CHUNK, |chunk_idx, chunk| {
        for (k, out) in chunk.chunks_exact_mut(c).enumerate() {
            let cell = chunk_idx * CELL_CHUNK + k;
            let (y, x, z) = (cell / (cw * cd), (cell / cd) % cw, cell % cd);
            for sy in (y * fh..(y + 1) * fh).filter(|&v| v < fh_ext) {
                for sx in (x * fw..(x + 1) * fw).filter(|&v| v < fw_ext) {
                    for sz in (z * fd..(z + 1) * fd).filter(|&v| v < fd_ext) {
                        let s = ((sy * fw_ext + sx) * fd_ext + sz) * c;
                        for (o, v) in out.iter_mut().zip(&src[s..s + c]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    });
    Ok(CellGrid::from_parts(shape, data, fine.image_channels()))
}

fn check_window(dims: &[usize], origin: &[usize], size: &[usize]) -> Result<()> {
    if origin.len() != dims.len() || size.len() != dims.len() {
        return Err(invalid(format!(
            "window rank mismatch: grid {dims:?}, origin {origin:?}, size {size:?}"
        )));
    }
    for ((&e, &o), &s) in dims.iter().zip(origin).zip(size) {
        if s == 0 || o + s > e {
            return Err(invalid(format!(
                "window origin {origin:?} size {size:?} out of bounds for {dims:?}"
            )));
        }
    }
    Ok(())
}

/// Copies the sub-window `[origin, origin + size)`.
pub fn crop_patch<T: Real>(grid: &CellGrid<T>, origin: &[usize], size: &[usize]) -> Result<CellGrid<T>> {
    check_window(grid.dims(), origin, size)?;
    let c = grid.channels();
    let shape = GridShape::new(size.to_vec(), c)?;
    let [sh, sw, sd] = shape.dims3();
    let [_, gw, gd] = grid.shape().dims3();
    let [oy, ox, oz] = pad3(origin, 0);
    let mut data = Vec::with_capacity(shape.len());
    for y in 0..sh {
        for x in 0..sw {
            let s = (((oy + y) * gw + ox + x) * gd + oz) * c;
            data.extend_from_slice(&grid.data()[s..s + sd * c]);
        }
    }
    Ok(CellGrid::from_parts(shape, data, grid.image_channels()))
}

/// Adjoint of [`crop_patch`]: embeds `patch` at `origin` in a zero grid of
/// extents `dims`.
pub fn crop_patch_adjoint<T: Real>(patch: &CellGrid<T>, origin: &[usize], dims: &[usize]) -> Result<CellGrid<T>> {
    check_window(dims, origin, patch.dims())?;
    let c = patch.channels();
    let shape = GridShape::new(dims.to_vec(), c)?;
    let [sh, sw, sd] = patch.shape().dims3();
    let [_, gw, gd] = shape.dims3();
    let [oy, ox, oz] = pad3(origin, 0);
    let mut data = vec![T::ZERO; shape.len()];
    for y in 0..sh {
        for x in 0..sw {
            let d = (((oy + y) * gw + ox + x) * gd + oz) * c;
            let s = (y * sw + x) * sd * c;
            data[d..d + sd * c].copy_from_slice(&patch.data()[s..s + sd * c]);
        }
    }
    Ok(CellGrid::from_parts(shape, data, patch.image_channels()))
}

/// Integer class ids over a 2D or 3D grid, row-major like [`CellGrid`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelGrid {
    dims: Vec<usize>,
    labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(dims: impl Into<Vec<usize>>, labels: Vec<u8>) -> Result<Self> {
        let dims = dims.into();
        let shape = GridShape::new(dims.clone(), 1)?;
        if labels.len() != shape.cells() {
            return Err(invalid(format!(
                "{} labels for extents {dims:?}",
                labels.len()
            )));
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn cells(&self) -> usize {
        self.labels.len()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn has_foreground(&self) -> bool {
        self.labels.iter().any(|&l| l != 0)
    }

    pub fn crop(&self, origin: &[usize], size: &[usize]) -> Result<Self> {
        check_window(&self.dims, origin, size)?;
        let [_, w, d] = pad3(&self.dims, 1);
        let [sh, sw, sd] = pad3(size, 1);
        let [oy, ox, oz] = pad3(origin, 0);
        let mut labels = Vec::with_capacity(sh * sw * sd);
        for y in 0..sh {
            for x in 0..sw {
                let s = ((oy + y) * w + ox + x) * d + oz;
                labels.extend_from_slice(&self.labels[s..s + sd]);
            }
        }
        Self::new(size.to_vec(), labels)
    }

    /// Takes every `factor`-th cell along each axis.
    pub fn subsample(&self, factors: &AxisFactors) -> Result<Self> {
        let out = downsampled_dims(&self.dims, factors)?;
        let [_, w, d] = pad3(&self.dims, 1);
        let [oh, ow, od] = pad3(&out, 1);
        let [fh, fw, fd] = factors.f3();
        let mut labels = Vec::with_capacity(oh * ow * od);
        for y in 0..oh {
            for x in 0..ow {
                for z in 0..od {
                    labels.push(self.labels[((y * fh) * w + x * fw) * d + z * fd]);
                }
            }
        }
        Self::new(out, labels)
    }
}
