//! Memory and runtime scaling measurements.
//!
//! For every `(engine, size)` pair the harness runs either one NCA rollout
//! with the finest level's weights or a full multi-level segmentation,
//! repeats it, and records the median wall time together with the peaks
//! reported by a fresh [`MemoryTracker`]. A tracker budget emulates a device
//! of bounded memory: runs that exceed it are recorded as `OOM` and the
//! sweep moves on.

use std::fs::OpenOptions;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{seed_from_image, CellGrid, GridShape};
use crate::memory::{BufferKind, MemoryReport, MemoryTracker};
use crate::model::OctreeModel;
use crate::octree::{segment, EngineKind};
use crate::reference::RolloutParams;

pub const BENCH_CSV_HEADER: [&str; 5] = ["engine", "cells", "seconds", "peak_persistent", "peak_transient"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    /// One rollout of the finest level's NCA on the full grid.
    #[default]
    Rollout,
    /// The whole multi-level pipeline.
    Segment,
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rollout" => Ok(BenchMode::Rollout),
            "segment" => Ok(BenchMode::Segment),
            other => Err(invalid(format!("unknown bench mode {other:?} (expected rollout or segment)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    /// Grid extents, in ascending cell count.
    pub sizes: Vec<Vec<usize>>,
    pub engines: Vec<EngineKind>,
    pub repetitions: usize,
    pub mode: BenchMode,
    /// Steps per rollout in [`BenchMode::Rollout`].
    pub steps: usize,
    pub seed: u64,
    /// Float budget of the emulated device.
    pub memory_limit: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: [64, 128, 256, 512, 1024].iter().map(|&s| vec![s, s]).collect(),
            engines: vec![EngineKind::Fused, EngineKind::Reference],
            repetitions: 3,
            mode: BenchMode::Rollout,
            steps: 10,
            seed: 0,
            memory_limit: None,
        }
    }
}

/// One CSV row. `None` measurements mark a run that ran out of memory.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub engine: EngineKind,
    pub cells: usize,
    pub seconds: Option<f64>,
    pub peak_persistent: Option<usize>,
    pub peak_transient: Option<usize>,
}

impl BenchRecord {
    pub fn is_oom(&self) -> bool {
        self.seconds.is_none()
    }

    fn csv_fields(&self) -> [String; 5] {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "OOM".to_owned());
        [
            self.engine.name().to_owned(),
            self.cells.to_string(),
            opt(self.seconds.map(|s| format!("{s:.6}"))),
            opt(self.peak_persistent.map(|p| p.to_string())),
            opt(self.peak_transient.map(|p| p.to_string())),
        ]
    }
}

/// A deterministic random image for the model's channel count.
pub fn random_image(extents: &[usize], channels: usize, seed: u64) -> Result<CellGrid> {
    let shape = GridShape::new(extents.to_vec(), channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| rng.gen::<f32>()).collect();
    CellGrid::new(shape, data, channels)
}

/// Runs one measured inference and returns its memory report.
pub fn measure_once(
    model: &OctreeModel,
    engine: EngineKind,
    image: &CellGrid,
    mode: BenchMode,
    steps: usize,
    seed: u64,
    tracker: &MemoryTracker,
) -> Result<MemoryReport> {
    match mode {
        BenchMode::Segment => {
            segment(image, model, engine, seed, Some(tracker))?;
        }
        BenchMode::Rollout => {
            let finest = model.num_levels() - 1;
            let w = &model.levels[finest];
            let _run = tracker.begin_run(image.cells());
            let state = tracker.track(seed_from_image(image, model.config.channels)?, BufferKind::State, "state")?;
            let params = RolloutParams::new(steps, seed, finest as u64, model.config.fire_rate);
            engine.rollout(state, w, &params, tracker)?;
        }
    }
    tracker.report()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn bench_scaling(model: &OctreeModel, cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.repetitions == 0 {
        return Err(invalid("bench needs at least one repetition"));
    }
    let cells: Vec<usize> = cfg.sizes.iter().map(|s| s.iter().product()).collect();
    if cells.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("bench sizes must be in ascending order"));
    }
    let mut records = Vec::new();
    for engine in &cfg.engines {
        for (size, &n) in cfg.sizes.iter().zip(&cells) {
            let image = random_image(size, model.config.image_channels, cfg.seed)?;
            let mut times = Vec::with_capacity(cfg.repetitions);
            let mut report = None;
            let mut oom = false;
            for _ in 0..cfg.repetitions {
                let tracker = match cfg.memory_limit {
                    Some(limit) => MemoryTracker::with_limit(limit),
                    None => MemoryTracker::new(),
                };
                let start = Instant::now();
                match measure_once(model, *engine, &image, cfg.mode, cfg.steps, cfg.seed, &tracker) {
                    Ok(r) => {
                        times.push(start.elapsed().as_secs_f64());
                        report.get_or_insert(r);
                    }
                    Err(Error::OutOfMemory { .. }) => {
                        oom = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            records.push(match (oom, report) {
                (false, Some(r)) => BenchRecord {
                    engine: *engine,
                    cells: n,
                    seconds: Some(median(times)),
                    peak_persistent: Some(r.peak_persistent_floats),
                    peak_transient: Some(r.peak_transient_floats_per_cell),
                },
                _ => BenchRecord {
                    engine: *engine,
                    cells: n,
                    seconds: None,
                    peak_persistent: None,
                    peak_transient: None,
                },
            });
        }
    }
    Ok(records)
}

/// Writes records as CSV. An existing non-empty file is appended to without
/// repeating the header.
pub fn write_bench_csv(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let has_header = std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if !has_header {
        w.write_record(BENCH_CSV_HEADER)?;
    }
    for r in records {
        w.write_record(r.csv_fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn bench_csv_string(records: &[BenchRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(BENCH_CSV_HEADER)?;
    for r in records {
        w.write_record(r.csv_fields())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Least-squares line `y = slope * x + intercept` and its coefficient of
/// determination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(invalid("a linear fit needs at least two paired points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("x values are all equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::octree::SchedulePolicy;

    fn small_model() -> OctreeModel {
        let mut cfg = ModelConfig::new(2, 1, 1);
        cfg.policy = SchedulePolicy::with_levels(2);
        OctreeModel::new(cfg, &[64, 64], 3).unwrap()
    }

    #[test]
    fn two_sizes_two_rows() {
        let cfg = BenchConfig {
            sizes: vec![vec![64, 64], vec![128, 128]],
            engines: vec![EngineKind::Fused],
            repetitions: 1,
            steps: 2,
            ..BenchConfig::default()
        };
        let rows = bench_scaling(&small_model(), &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].cells, rows[1].cells), (4096, 16384));
        let csv = bench_csv_string(&rows).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("engine,cells,seconds,peak_persistent,peak_transient"));
        assert!(lines.next().unwrap().starts_with("fused,4096,"));
    }

    #[test]
    fn oom_sentinel_and_continue() {
        let cfg = BenchConfig {
            sizes: vec![vec![16, 16], vec![64, 64]],
            engines: vec![EngineKind::Reference, EngineKind::Fused],
            repetitions: 1,
            steps: 1,
            memory_limit: Some(200_000),
            ..BenchConfig::default()
        };
        let rows = bench_scaling(&small_model(), &cfg).unwrap();
        assert!(!rows[0].is_oom());
        assert!(rows[1].is_oom(), "reference at 64x64 exceeds the budget");
        assert!(!rows[3].is_oom(), "fused at 64x64 fits the budget");
        assert!(bench_csv_string(&rows).unwrap().contains("reference,4096,OOM,OOM,OOM"));
    }

    #[test]
    fn descending_sizes_rejected() {
        let cfg = BenchConfig {
            sizes: vec![vec![32, 32], vec![16, 16]],
            ..BenchConfig::default()
        };
        assert!(bench_scaling(&small_model(), &cfg).is_err());
    }

    #[test]
    fn csv_appends_without_second_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        let r = BenchRecord {
            engine: EngineKind::Fused,
            cells: 4,
            seconds: Some(0.5),
            peak_persistent: Some(128),
            peak_transient: Some(96),
        };
        write_bench_csv(std::slice::from_ref(&r), &p).unwrap();
        write_bench_csv(&[r], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "engine,cells,seconds,peak_persistent,peak_transient\nfused,4,0.500000,128,96\nfused,4,0.500000,128,96\n");
    }

    #[test]
    fn fit_of_exact_line() {
        let f = linear_fit(&[1.0, 2.0, 4.0], &[3.0, 5.0, 9.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_err());
    }
}
