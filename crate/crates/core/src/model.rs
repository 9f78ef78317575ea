//! NCA parameters, the multi-level model, and the `ONCA` model file.
//!
//! One backbone NCA is a depthwise 3^d convolution without bias, a linear
//! layer `2C -> hidden` with bias, a ReLU, and a linear layer
//! `hidden -> C` without bias. All parameters of one level live in a single
//! contiguous blob in file order: conv, w1, b1, w2.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! "ONCA" | u32 version (=1) | u32 header length | JSON header | blob
//! ```
//!
//! The blob holds each level's parameters, coarsest level first, as f32.

use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::octree::{build_schedule, PyramidSchedule, SchedulePolicy};
use crate::rng::mix;
use crate::scalar::Real;

pub const MODEL_MAGIC: [u8; 4] = *b"ONCA";
pub const MODEL_VERSION: u32 = 1;

/// Architecture of a single backbone NCA.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeightDims {
    pub spatial_rank: usize,
    pub channels: usize,
    pub hidden: usize,
}

impl WeightDims {
    pub fn new(spatial_rank: usize, channels: usize, hidden: usize) -> Result<Self> {
        if !(2..=3).contains(&spatial_rank) || channels == 0 || hidden == 0 {
            return Err(invalid(format!(
                "invalid NCA dimensions: rank {spatial_rank}, channels {channels}, hidden {hidden}"
            )));
        }
        Ok(Self {
            spatial_rank,
            channels,
            hidden,
        })
    }

    /// Taps of the perception kernel, `3^rank`.
    pub fn kernel_taps(&self) -> usize {
        3usize.pow(self.spatial_rank as u32)
    }

    pub fn conv_len(&self) -> usize {
        self.channels * self.kernel_taps()
    }

    pub fn w1_len(&self) -> usize {
        2 * self.channels * self.hidden
    }

    pub fn b1_len(&self) -> usize {
        self.hidden
    }

    pub fn w2_len(&self) -> usize {
        self.hidden * self.channels
    }

    pub fn param_count(&self) -> usize {
        self.conv_len() + self.w1_len() + self.b1_len() + self.w2_len()
    }

    /// Per-cell working set of the fused kernel: perception input, its
    /// concatenation partner, and the hidden layer.
    pub fn cell_working_set(&self) -> usize {
        2 * self.channels + self.hidden
    }
}

/// Neighbour offsets `(dh, dw, dd)` of the perception kernel in kernel
/// (row-major) order. 2D kernels have `dd = 0`.
pub fn kernel_offsets(spatial_rank: usize) -> Vec<[isize; 3]> {
    let depth: &[isize] = if spatial_rank == 3 { &[-1, 0, 1] } else { &[0] };
    let mut out = Vec::with_capacity(3usize.pow(spatial_rank as u32));
    for dh in -1..=1 {
        for dw in -1..=1 {
            for &dd in depth {
                out.push([dh, dw, dd]);
            }
        }
    }
    out
}

/// Parameters of one backbone NCA.
#[derive(Clone, Debug, PartialEq)]
pub struct NcaWeights<T: Real = f32> {
    dims: WeightDims,
    data: Vec<T>,
}

pub struct WeightsMut<'a, T> {
    pub conv: &'a mut [T],
    pub w1: &'a mut [T],
    pub b1: &'a mut [T],
    pub w2: &'a mut [T],
}

impl<T: Real> NcaWeights<T> {
    pub fn zeros(dims: WeightDims) -> Self {
        Self {
            dims,
            data: vec![T::ZERO; dims.param_count()],
        }
    }

    pub fn from_blob(dims: WeightDims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.param_count() {
            return Err(invalid(format!(
                "blob of {} values does not match {} parameters",
                data.len(),
                dims.param_count()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Standard initialisation: conv and w1 uniform in `±1/sqrt(fan_in)`,
    /// b1 and w2 zero, so a fresh model leaves its state unchanged.
    pub fn init(dims: WeightDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(dims);
        let taps = dims.kernel_taps();
        let parts = w.parts_mut();
        fill_uniform(parts.conv, 1.0 / (taps as f32).sqrt(), &mut rng);
        fill_uniform(parts.w1, 1.0 / ((2 * dims.channels) as f32).sqrt(), &mut rng);
        w
    }

    /// Like [`NcaWeights::init`] but with every layer random, including b1
    /// and w2. Used where a generic, non-trivial update rule is needed.
    pub fn init_generic(dims: WeightDims, seed: u64) -> Self {
        let mut w = Self::init(dims, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x5eed));
        let parts = w.parts_mut();
        fill_uniform(parts.b1, 0.1, &mut rng);
        fill_uniform(parts.w2, 1.0 / (dims.hidden as f32).sqrt(), &mut rng);
        w
    }

    /// Random weights whose first-layer pre-activations stay far from zero
    /// while states remain of order one: |b1| in [0.8, 1.2], small w1 and w2.
    /// Every hidden unit is then either always active or always idle, so the
    /// rollout is smooth in all parameters around this point.
    pub fn init_smooth(dims: WeightDims, seed: u64) -> Self {
        let mut w = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x5300_7468));
        let parts = w.parts_mut();
        fill_uniform(parts.conv, 0.5, &mut rng);
        fill_uniform(parts.w1, 0.02, &mut rng);
        let magnitude = Uniform::new_inclusive(0.8f32, 1.2);
        for b in parts.b1.iter_mut() {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            *b = T::from_f32(sign * magnitude.sample(&mut rng));
        }
        fill_uniform(parts.w2, 0.05, &mut rng);
        w
    }

    pub fn dims(&self) -> WeightDims {
        self.dims
    }

    pub fn blob(&self) -> &[T] {
        &self.data
    }

    pub fn blob_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn conv(&self) -> &[T] {
        &self.data[..self.dims.conv_len()]
    }

    pub fn w1(&self) -> &[T] {
        let s = self.dims.conv_len();
        &self.data[s..s + self.dims.w1_len()]
    }

    pub fn b1(&self) -> &[T] {
        let s = self.dims.conv_len() + self.dims.w1_len();
        &self.data[s..s + self.dims.b1_len()]
    }

    pub fn w2(&self) -> &[T] {
        let s = self.dims.conv_len() + self.dims.w1_len() + self.dims.b1_len();
        &self.data[s..]
    }

    pub fn parts_mut(&mut self) -> WeightsMut<'_, T> {
        let d = self.dims;
        let (conv, rest) = self.data.split_at_mut(d.conv_len());
        let (w1, rest) = rest.split_at_mut(d.w1_len());
        let (b1, w2) = rest.split_at_mut(d.b1_len());
        WeightsMut { conv, w1, b1, w2 }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> NcaWeights<U> {
        NcaWeights {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

fn fill_uniform<T: Real>(dst: &mut [T], bound: f32, rng: &mut ChaCha8Rng) {
    let dist = Uniform::new_inclusive(-bound, bound);
    for v in dst {
        *v = T::from_f32(dist.sample(rng));
    }
}

/// Architecture and pyramid policy of a multi-level model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spatial_rank: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_one")]
    pub image_channels: usize,
    #[serde(default = "default_one")]
    pub num_classes: usize,
    #[serde(default = "default_fire_rate")]
    pub fire_rate: f32,
    #[serde(flatten)]
    pub policy: SchedulePolicy,
}

fn default_channels() -> usize {
    16
}
fn default_hidden() -> usize {
    64
}
fn default_one() -> usize {
    1
}
fn default_fire_rate() -> f32 {
    0.5
}

impl ModelConfig {
    /// 16 state channels, 64 hidden units, fire rate 0.5, five levels.
    pub fn new(spatial_rank: usize, image_channels: usize, num_classes: usize) -> Self {
        Self {
            spatial_rank,
            channels: default_channels(),
            hidden: default_hidden(),
            image_channels,
            num_classes,
            fire_rate: default_fire_rate(),
            policy: SchedulePolicy::default(),
        }
    }

    pub fn weight_dims(&self) -> Result<WeightDims> {
        WeightDims::new(self.spatial_rank, self.channels, self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        self.weight_dims()?;
        if self.image_channels == 0 || self.num_classes == 0 {
            return Err(invalid("image_channels and num_classes must be positive"));
        }
        if self.image_channels + self.num_classes > self.channels {
            return Err(invalid(format!(
                "{} image channels and {} class channels do not fit in {} channels",
                self.image_channels, self.num_classes, self.channels
            )));
        }
        if !(self.fire_rate > 0.0 && self.fire_rate <= 1.0) {
            return Err(invalid(format!("fire_rate {} outside (0, 1]", self.fire_rate)));
        }
        self.policy.validate()
    }

    /// Channel range holding the class logits (the trailing channels).
    pub fn logit_channels(&self) -> std::ops::Range<usize> {
        self.channels - self.num_classes..self.channels
    }
}

/// One NCA per pyramid level (coarsest first) plus the schedule of record.
#[derive(Clone, Debug, PartialEq)]
pub struct OctreeModel<T: Real = f32> {
    pub config: ModelConfig,
    pub levels: Vec<NcaWeights<T>>,
    /// Schedule for the extents the model was built or trained for.
    pub schedule: PyramidSchedule,
    pub seed: u64,
}

impl<T: Real> OctreeModel<T> {
    pub fn new(config: ModelConfig, reference_extents: &[usize], seed: u64) -> Result<Self> {
        Self::build(config, reference_extents, seed, NcaWeights::init)
    }

    /// All levels with fully random weights; see [`NcaWeights::init_generic`].
    pub fn new_generic(config: ModelConfig, reference_extents: &[usize], seed: u64) -> Result<Self> {
        Self::build(config, reference_extents, seed, NcaWeights::init_generic)
    }

    /// All levels from [`NcaWeights::init_smooth`].
    pub fn new_smooth(config: ModelConfig, reference_extents: &[usize], seed: u64) -> Result<Self> {
        Self::build(config, reference_extents, seed, NcaWeights::init_smooth)
    }

    fn build(
        config: ModelConfig,
        reference_extents: &[usize],
        seed: u64,
        init: fn(WeightDims, u64) -> NcaWeights<T>,
    ) -> Result<Self> {
        config.validate()?;
        if reference_extents.len() != config.spatial_rank {
            return Err(invalid(format!(
                "extents {reference_extents:?} do not match spatial rank {}",
                config.spatial_rank
            )));
        }
        let schedule = build_schedule(reference_extents, &config.policy)?;
        let dims = config.weight_dims()?;
        let levels = (0..config.policy.num_levels)
            .map(|l| init(dims, mix(seed.wrapping_add(l as u64))))
            .collect();
        Ok(Self {
            config,
            levels,
            schedule,
            seed,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn weight_dims(&self) -> WeightDims {
        self.levels
            .first()
            .map(|w| w.dims())
            .unwrap_or_else(|| self.config.weight_dims().expect("validated config"))
    }

    /// All parameters concatenated level by level.
    pub fn flat_params(&self) -> Vec<T> {
        self.levels.iter().flat_map(|w| w.blob().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != count_params(self) {
            return Err(invalid(format!(
                "{} values for {} parameters",
                params.len(),
                count_params(self)
            )));
        }
        let mut rest = params;
        for w in &mut self.levels {
            let (head, tail) = rest.split_at(w.blob().len());
            w.blob_mut().copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> OctreeModel<U> {
        OctreeModel {
            config: self.config.clone(),
            levels: self.levels.iter().map(|w| w.cast()).collect(),
            schedule: self.schedule.clone(),
            seed: self.seed,
        }
    }
}

/// Total learned parameters: per level `C*3^d + 2C*hidden + hidden + hidden*C`.
pub fn count_params<T: Real>(model: &OctreeModel<T>) -> usize {
    model.levels.iter().map(|w| w.dims().param_count()).sum()
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    #[serde(flatten)]
    config: ModelConfig,
    schedule: PyramidSchedule,
    seed: u64,
}

pub fn encode_model(model: &OctreeModel<f32>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&ModelHeader {
        config: model.config.clone(),
        schedule: model.schedule.clone(),
        seed: model.seed,
    })?;
    let blob_len = count_params(model) * 4;
    let mut out = Vec::with_capacity(12 + header.len() + blob_len);
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for w in &model.levels {
        for v in w.blob() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<OctreeModel<f32>> {
    if bytes.len() < 4 || bytes[..4] != MODEL_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic {
            expected: MODEL_MAGIC,
            found,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Header("file ends inside the fixed header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            expected: MODEL_VERSION,
            found: version,
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Header(format!(
            "header declares {header_len} bytes but only {} remain",
            bytes.len() - 12
        )));
    }
    let header: ModelHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| Error::Header(e.to_string()))?;
    header.config.validate()?;
    if header.schedule.levels.len() != header.config.policy.num_levels {
        return Err(Error::Header(format!(
            "schedule has {} levels, config declares {}",
            header.schedule.levels.len(),
            header.config.policy.num_levels
        )));
    }
    let dims = header.config.weight_dims()?;
    let per_level = dims.param_count();
    let expected = per_level * header.config.policy.num_levels * 4;
    let blob = &bytes[header_end..];
    if blob.len() < expected {
        return Err(Error::TruncatedBlob {
            expected,
            found: blob.len(),
        });
    }
    if blob.len() > expected {
        return Err(Error::LengthMismatch {
            expected,
            found: blob.len(),
        });
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model weights".into()));
    }
    let levels = values
        .chunks_exact(per_level)
        .map(|c| NcaWeights::from_blob(dims, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(OctreeModel {
        config: header.config,
        levels,
        schedule: header.schedule,
        seed: header.seed,
    })
}

pub fn save_model(model: &OctreeModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_model(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<OctreeModel<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Unreadable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .read_to_end(&mut bytes)?;
    decode_model(&bytes)
}
