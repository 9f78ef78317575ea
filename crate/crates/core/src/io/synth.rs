//! Deterministic synthetic segmentation tasks.
//!
//! * `disks2d`: bright anti-aliased disks on a textured background; the mask
//!   is every pixel whose centre lies inside a disk.
//! * `blobs3d`: a sum of isotropic Gaussian bumps; the mask is the region
//!   where the field exceeds one half.
//! * `stripes2d`: horizontal stripes of two intensities plus a square marker
//!   in the top-left corner that is either white or black. Outside the marker
//!   a pixel is foreground when its stripe type matches the marker colour, so
//!   labelling a stripe far from the corner needs global context.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{CellGrid, GridShape, LabelGrid};
use crate::io::manifest::{DatasetManifest, ManifestEntry, Split, TaskMeta, DEFAULT_TEST_FRACTION};
use crate::io::{save_image, save_mask, Sample};
use crate::rng::mix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    Disks2d,
    Blobs3d,
    Stripes2d,
}

impl SynthTask {
    pub const ALL: [SynthTask; 3] = [SynthTask::Disks2d, SynthTask::Blobs3d, SynthTask::Stripes2d];

    pub fn name(self) -> &'static str {
        match self {
            SynthTask::Disks2d => "disks2d",
            SynthTask::Blobs3d => "blobs3d",
            SynthTask::Stripes2d => "stripes2d",
        }
    }

    pub fn spatial_rank(self) -> usize {
        match self {
            SynthTask::Blobs3d => 3,
            _ => 2,
        }
    }

    pub fn meta(self) -> TaskMeta {
        TaskMeta {
            name: self.name().to_owned(),
            spatial_rank: self.spatial_rank(),
            image_channels: 1,
            num_classes: 1,
        }
    }

    fn check_extents(self, extents: &[usize]) -> Result<()> {
        let min = match self {
            SynthTask::Stripes2d => 8,
            _ => 4,
        };
        if extents.len() != self.spatial_rank() || extents.iter().any(|&e| e < min) {
            return Err(invalid(format!(
                "{} needs {} extents of at least {min}, got {extents:?}",
                self.name(),
                self.spatial_rank()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| invalid(format!("unknown task '{s}' (expected disks2d, blobs3d or stripes2d)")))
    }
}

fn sample_from(dims: Vec<usize>, image: Vec<f32>, labels: Vec<u8>) -> Result<Sample> {
    let grid = CellGrid::new(GridShape::new(dims.clone(), 1)?, image, 1)?;
    Sample::new(grid, LabelGrid::new(dims, labels)?)
}

/// Low-frequency texture: a few random plane waves.
struct Texture {
    waves: Vec<([f32; 3], f32, f32)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, rank: usize, amplitude: f32) -> Self {
        let waves = (0..3)
            .map(|_| {
                let mut k = [0.0f32; 3];
                for v in k.iter_mut().take(rank) {
                    *v = rng.gen_range(-0.6..0.6);
                }
                (k, rng.gen_range(0.0..std::f32::consts::TAU), amplitude / 3.0)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [f32; 3]) -> f32 {
        self.waves
            .iter()
            .map(|(k, phase, a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin())
            .sum()
    }
}

pub fn disks_sample(extents: &[usize], seed: u64) -> Result<Sample> {
    SynthTask::Disks2d.check_extents(extents)?;
    let (h, w) = (extents[0], extents[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let short = h.min(w) as f32;
    let disks: Vec<(f32, f32, f32)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let r = rng.gen_range(0.08 * short..0.2 * short).max(1.5);
            (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32), r)
        })
        .collect();
    let texture = Texture::new(&mut rng, 2, 0.12);
    const SS: usize = 4;
    let mut image = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let inside = |py: f32, px: f32| disks.iter().any(|&(cy, cx, r)| (py - cy).powi(2) + (px - cx).powi(2) <= r * r);
            let (cy, cx) = (y as f32 + 0.5, x as f32 + 0.5);
            let mut covered = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let py = y as f32 + (sy as f32 + 0.5) / SS as f32;
                    let px = x as f32 + (sx as f32 + 0.5) / SS as f32;
                    covered += usize::from(inside(py, px));
                }
            }
            let coverage = covered as f32 / (SS * SS) as f32;
            let noise = texture.at([cy, cx, 0.0]) + rng.gen_range(-0.06..0.06);
            image.push((0.25 + 0.45 * coverage + noise).clamp(0.0, 1.0));
            labels.push(u8::from(inside(cy, cx)));
        }
    }
    sample_from(extents.to_vec(), image, labels)
}

pub fn blobs_sample(extents: &[usize], seed: u64) -> Result<Sample> {
    SynthTask::Blobs3d.check_extents(extents)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<([f32; 3], f32)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let c = [0, 1, 2].map(|a| rng.gen_range(0..extents[a]) as f32);
            let short = *extents.iter().min().expect("rank 3") as f32;
            (c, rng.gen_range(0.12 * short..0.25 * short).max(1.0))
        })
        .collect();
    let texture = Texture::new(&mut rng, 3, 0.08);
    let n: usize = extents.iter().product();
    let mut image = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..extents[0] {
        for y in 0..extents[1] {
            for x in 0..extents[2] {
                let p = [z as f32, y as f32, x as f32];
                let field: f32 = blobs
                    .iter()
                    .map(|(c, s)| {
                        let d2: f32 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                        (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum();
                labels.push(u8::from(field > 0.5));
                let noise = texture.at(p) + rng.gen_range(-0.05..0.05);
                image.push((0.2 + 0.6 * field.min(1.0) + noise).clamp(0.0, 1.0));
            }
        }
    }
    sample_from(extents.to_vec(), image, labels)
}

/// Side length of the stripes marker square.
pub fn marker_size(extents: &[usize]) -> usize {
    (extents[0].min(extents[1]) * 3 / 16).max(2)
}

/// A stripes sample with an explicit marker colour. Everything except the
/// marker is drawn from `seed` alone.
pub fn stripes_sample(extents: &[usize], seed: u64, marker: bool) -> Result<Sample> {
    SynthTask::Stripes2d.check_extents(extents)?;
    let (h, w) = (extents[0], extents[1]);
    let m = marker_size(extents);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_period = rng.gen_range(2..=4usize);
    let phase = rng.gen_range(0..2 * half_period);
    let mut image = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        let light = ((y + phase) / half_period) % 2 == 1;
        for x in 0..w {
            let noise = rng.gen_range(-0.05..0.05f32);
            if y < m && x < m {
                image.push(if marker { 1.0 } else { 0.0 });
                labels.push(0);
            } else {
                image.push(if light { 0.6 } else { 0.35 } + noise);
                labels.push(u8::from(light == marker));
            }
        }
    }
    sample_from(extents.to_vec(), image, labels)
}

/// One sample of `task`; the same `(extents, seed)` always gives the same
/// sample.
pub fn synth_sample(task: SynthTask, extents: &[usize], seed: u64) -> Result<Sample> {
    match task {
        SynthTask::Disks2d => disks_sample(extents, seed),
        SynthTask::Blobs3d => blobs_sample(extents, seed),
        SynthTask::Stripes2d => stripes_sample(extents, seed, mix(seed ^ 0x6d61_726b) & 1 == 1),
    }
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    mix(seed ^ mix(index as u64 + 1))
}

/// `count` samples of `task` in memory.
pub fn synth_dataset(task: SynthTask, count: usize, extents: &[usize], seed: u64) -> Result<Vec<Sample>> {
    task.check_extents(extents)?;
    (0..count).map(|i| synth_sample(task, extents, sample_seed(seed, i))).collect()
}

/// Writes `count` samples to `out_dir` (PNG for 2D, `OVOL` for 3D), assigns
/// a patient-level split, and saves `manifest.json`. Every sample is its own
/// patient.
pub fn gen_synthetic(task: SynthTask, count: usize, extents: &[usize], seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    task.check_extents(extents)?;
    std::fs::create_dir_all(out_dir)?;
    let ext = if task.spatial_rank() == 2 { "png" } else { "ovol" };
    let mut manifest = DatasetManifest::new(task.meta(), out_dir);
    for i in 0..count {
        let sample = synth_sample(task, extents, sample_seed(seed, i))?;
        let image = format!("case{i:04}_image.{ext}");
        let mask = format!("case{i:04}_mask.{ext}");
        save_image(&sample.image, out_dir.join(&image))?;
        save_mask(&sample.mask, out_dir.join(&mask))?;
        manifest.entries.push(ManifestEntry {
            patient: format!("case{i:04}"),
            image: image.into(),
            mask: mask.into(),
            split: Split::Train,
        });
    }
    manifest.assign_splits(DEFAULT_TEST_FRACTION, seed)?;
    manifest.save()?;
    Ok(manifest)
}
