//! Command-line front end: training, inference, evaluation, benchmarks,
//! gradient checks, synthetic data and pyramid dumps.
//!
//! Exit status is 0 on success, 2 for usage and configuration problems
//! (bad flags, missing or malformed input files, invalid settings) and 1 for
//! failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use octree_nca::bench::{bench_csv_string, bench_scaling, write_bench_csv, BenchConfig, BenchMode};
use octree_nca::io::manifest::DatasetManifest;
use octree_nca::io::{gen_synthetic, load_image, save_image, save_mask, synth_dataset, Split, SynthTask};
use octree_nca::model::{load_model, ModelConfig};
use octree_nca::octree::{build_pyramid, build_schedule, SchedulePolicy};
use octree_nca::train::gradcheck::{gradcheck_with, GRADCHECK_TOLERANCE};
use octree_nca::train::{evaluate_dice, fit, save_checkpoint, Sample, TrainConfig};
use octree_nca::{segment, EngineKind, Error, OctreeModel};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "octree-nca", version, about = "Multi-level neural cellular automaton segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train { config: PathBuf },
    /// Segment one image (PNG or OVOL) and write the mask.
    Infer {
        model: PathBuf,
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "fused")]
        engine: EngineKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report Dice of a model on a dataset manifest.
    Eval {
        model: PathBuf,
        manifest: PathBuf,
        /// train, test or all
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "fused")]
        engine: EngineKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure runtime and memory over grid sizes.
    Bench {
        model: PathBuf,
        /// Comma-separated sizes: `64` for a square or cube, or `64x64x8`.
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
        sizes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "fused,reference")]
        engines: Vec<EngineKind>,
        /// CSV file to append to; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value = "rollout")]
        mode: BenchMode,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Float budget; larger runs are recorded as OOM.
        #[arg(long)]
        memory_limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also train the finer level on a window.
        #[arg(long)]
        patched: bool,
    },
    /// Write a synthetic dataset and its manifest.
    Gen {
        task: SynthTask,
        #[arg(long)]
        count: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        extents: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump every pyramid level of an image.
    Pyramid {
        input: PathBuf,
        #[arg(long)]
        levels: usize,
        #[arg(long, default_value = "pyramid")]
        out: PathBuf,
        #[arg(long, default_value_t = SchedulePolicy::default().extent_floor)]
        extent_floor: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_)
            | Error::Unreadable { .. }
            | Error::Json(_)
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::TruncatedBlob { .. }
            | Error::LengthMismatch { .. }
            | Error::Header(_)
            | Error::ExtentMismatch { .. } => Failure::Usage(e.to_string()),
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { config } => train(&config),
        Command::Infer {
            model,
            input,
            output,
            engine,
            seed,
        } => infer(&model, &input, &output, engine, seed),
        Command::Eval {
            model,
            manifest,
            split,
            engine,
            seed,
        } => eval(&model, &manifest, &split, engine, seed),
        Command::Bench {
            model,
            sizes,
            engines,
            out,
            reps,
            mode,
            steps,
            memory_limit,
            seed,
        } => bench(&model, &sizes, engines, out.as_deref(), reps, mode, steps, memory_limit, seed),
        Command::Gradcheck { seed, patched } => gradcheck_cmd(seed, patched),
        Command::Gen {
            task,
            count,
            extents,
            out,
            seed,
        } => gen(task, count, &extents, &out, seed),
        Command::Pyramid {
            input,
            levels,
            out,
            extent_floor,
        } => pyramid(&input, levels, &out, extent_floor),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticData {
    task: SynthTask,
    count: usize,
    extents: Vec<usize>,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum DataSource {
    Manifest(PathBuf),
    Synthetic(SyntheticData),
}

/// The `train` configuration file. Relative paths are resolved against the
/// file's directory.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    data: DataSource,
    /// Checkpoint path; optimizer progress goes next to it as `<path>.json`.
    output: PathBuf,
    #[serde(default)]
    log: Option<PathBuf>,
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn load_split(data: &DataSource, base: &Path) -> CliResult<(Vec<Sample>, Vec<Sample>)> {
    match data {
        DataSource::Manifest(p) => {
            let m = DatasetManifest::load(base.join(p))?;
            Ok((m.load_samples(Split::Train)?, m.load_samples(Split::Test)?))
        }
        DataSource::Synthetic(s) => {
            let samples = synth_dataset(s.task, s.count, &s.extents, s.seed)?;
            let n_test = (samples.len() as f64 * octree_nca::io::manifest::DEFAULT_TEST_FRACTION).round() as usize;
            let n_test = if samples.len() >= 2 { n_test.min(samples.len() - 1) } else { n_test };
            let mut train = samples;
            let test = train.split_off(train.len() - n_test);
            Ok((train, test))
        }
    }
}

fn train(config: &Path) -> CliResult {
    let cfg = read_config(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let (train_set, val_set) = load_split(&cfg.data, base)?;
    let reference = train_set
        .first()
        .or(val_set.first())
        .ok_or_else(|| usage("the dataset is empty"))?
        .image
        .dims()
        .to_vec();
    if reference.len() != cfg.model.spatial_rank {
        return Err(usage(format!(
            "data extents {reference:?} do not match spatial_rank {}",
            cfg.model.spatial_rank
        )));
    }
    let model = OctreeModel::new(cfg.model.clone(), &reference, cfg.train.seed)?;
    let log = cfg.log.as_ref().map(|p| base.join(p));
    let start = Instant::now();
    let outcome = fit(model, &train_set, &val_set, &cfg.train, log.as_deref())?;
    let output = base.join(&cfg.output);
    save_checkpoint(&outcome, &output)?;
    let last = outcome.history.last();
    println!(
        "trained {} epochs on {} samples in {:.1}s; loss {}; validation dice {}; checkpoint {}",
        outcome.epochs_run,
        train_set.len(),
        start.elapsed().as_secs_f64(),
        last.map_or("n/a".into(), |r| format!("{:.5}", r.loss)),
        last.and_then(|r| r.val_dice).map_or("n/a".into(), |d| format!("{d:.4}")),
        output.display()
    );
    Ok(())
}

fn infer(model: &Path, input: &Path, output: &Path, engine: EngineKind, seed: u64) -> CliResult {
    let model = load_model(model)?;
    let image = load_image(input)?;
    let start = Instant::now();
    let result = segment(&image, &model, engine, seed, None)?;
    save_mask(&result.mask, output)?;
    let fg = result.mask.labels().iter().filter(|&&l| l != 0).count();
    println!(
        "{engine}: {} cells, {} levels, {:.3}s, {fg} foreground cells -> {}",
        image.cells(),
        result.schedule.num_levels(),
        start.elapsed().as_secs_f64(),
        output.display()
    );
    Ok(())
}

fn eval(model: &Path, manifest: &Path, split: &str, engine: EngineKind, seed: u64) -> CliResult {
    let model = load_model(model)?;
    let m = DatasetManifest::load(manifest)?;
    let samples = match split {
        "train" => m.load_samples(Split::Train)?,
        "test" => m.load_samples(Split::Test)?,
        "all" => {
            let mut s = m.load_samples(Split::Train)?;
            s.extend(m.load_samples(Split::Test)?);
            s
        }
        other => return Err(usage(format!("unknown split '{other}' (expected train, test or all)"))),
    };
    if samples.is_empty() {
        return Err(usage(format!("split '{split}' of {} is empty", manifest.display())));
    }
    let report = evaluate_dice(&model, &samples, engine, seed)?;
    for (class, d) in report.per_class.iter().enumerate() {
        if let Some(d) = d {
            println!("class {class}: dice {d:.4}");
        }
    }
    println!("mean dice {:.4} over {} samples", report.mean, samples.len());
    Ok(())
}

fn parse_size(s: &str, rank: usize) -> CliResult<Vec<usize>> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("invalid size '{s}'")))?;
    match parts.len() {
        1 => Ok(vec![parts[0]; rank]),
        n if n == rank => Ok(parts),
        _ => Err(usage(format!("size '{s}' does not have {rank} axes"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn bench(
    model: &Path,
    sizes: &[String],
    engines: Vec<EngineKind>,
    out: Option<&Path>,
    reps: usize,
    mode: BenchMode,
    steps: usize,
    memory_limit: Option<usize>,
    seed: u64,
) -> CliResult {
    let model = load_model(model)?;
    let sizes = sizes
        .iter()
        .map(|s| parse_size(s, model.config.spatial_rank))
        .collect::<CliResult<Vec<_>>>()?;
    let cfg = BenchConfig {
        sizes,
        engines,
        repetitions: reps,
        mode,
        steps,
        seed,
        memory_limit,
    };
    let records = bench_scaling(&model, &cfg)?;
    match out {
        Some(path) => {
            write_bench_csv(&records, path)?;
            println!("{} rows appended to {}", records.len(), path.display());
        }
        None => print!("{}", bench_csv_string(&records)?),
    }
    Ok(())
}

fn gradcheck_cmd(seed: u64, patched: bool) -> CliResult {
    let r = gradcheck_with(seed, patched)?;
    println!(
        "seed {} params {} max relative error {:.3e} (tolerance {:.0e}) kink margin {:.3}",
        r.seed, r.params, r.max_rel_error, GRADCHECK_TOLERANCE, r.kink_margin
    );
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:.0e}",
            r.max_rel_error
        )))
    }
}

fn gen(task: SynthTask, count: usize, extents: &[usize], out: &Path, seed: u64) -> CliResult {
    let m = gen_synthetic(task, count, extents, seed, out)?;
    println!(
        "{task}: {} samples ({} train, {} test) in {}",
        m.len(),
        m.entries_in(Split::Train).count(),
        m.entries_in(Split::Test).count(),
        out.display()
    );
    Ok(())
}

fn pyramid(input: &Path, levels: usize, out: &Path, extent_floor: usize) -> CliResult {
    let image = load_image(input)?;
    let policy = SchedulePolicy {
        extent_floor,
        ..SchedulePolicy::with_levels(levels)
    };
    policy.validate()?;
    let schedule = build_schedule(image.dims(), &policy)?;
    let grids = build_pyramid(&image, &schedule)?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let ext = if image.dims().len() == 2 { "png" } else { "ovol" };
    for (l, (spec, grid)) in schedule.levels.iter().zip(&grids).enumerate() {
        let dims: Vec<String> = spec.extents.iter().map(usize::to_string).collect();
        let name = format!("level{l}_{}.{ext}", dims.join("x"));
        save_image(grid, out.join(&name))?;
        let factors = spec
            .factors
            .as_ref()
            .map_or("-".to_owned(), |f| format!("{:?}", f.as_slice()));
        println!("level {l}: extents {:?} steps {} factors {factors} -> {name}", spec.extents, spec.steps);
    }
    Ok(())
}
