use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nbm::checks::{run_suite, Faults, SuiteOptions};
use nbm::data::{load_images, load_labels, one_hot, synth_bimodal, synth_gaussian_classes};
use nbm::{sample_batch, CondParams, Dataset, DType, InitMode, NbmModel, Real, SampleOptions, StepMetrics, Tensor, Trainer,
    VisibleKind};

use crate::checkpoint::{self, AnyCheckpoint, Checkpoint};
use crate::config::{DataSource, RunConfig};
use crate::error::CliError;
use crate::pgm::{map_fixed, map_minmax, tile_shape, Grid};

pub const MODEL_FILE: &str = "model.nbm";
pub const PARTIAL_FILE: &str = "model.partial.nbm";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_FILE: &str = "config.resolved.toml";

pub fn build_dataset<T: Real>(cfg: &RunConfig) -> Result<Dataset<T>, CliError> {
    let kind = cfg.spec.visible_kind;
    let data_err = |e: nbm::Error| CliError::Config(format!("data: {e}"));
    match &cfg.data {
        DataSource::Idx {
            images,
            labels,
            limit,
            n_classes,
            noise_var,
            noise_mode,
            noise_seed,
            threshold,
        } => {
            let mut imgs = load_images(images).map_err(data_err)?;
            let mut labs = load_labels(labels).map_err(data_err)?;
            if let Some(n) = *limit {
                imgs.truncate(n);
                labs.truncate(n);
            }
            match kind {
                VisibleKind::Gaussian => {
                    Dataset::gaussian_images(&imgs, &labs, *n_classes, *noise_var, *noise_mode, *noise_seed)
                }
                VisibleKind::Ising => Dataset::ising_images(&imgs, &labs, *n_classes, *threshold),
            }
            .map_err(data_err)
        }
        DataSource::SynthGaussian { spec, seed } => synth_gaussian_classes(spec, *seed).map_err(data_err),
        DataSource::SynthBimodal { spec, seed } => synth_bimodal(spec, *seed).map_err(data_err),
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub steps: u64,
    pub epochs: u64,
    pub last: Option<StepMetrics>,
}

/// `nbm train`: fits the configured model and writes the checkpoint, metrics
/// and the resolved configuration into the output directory.
/// Progress lines go to stderr when `verbose` is set.
pub fn train(config: &Path, resume: Option<&Path>, sets: &[String], verbose: bool) -> Result<TrainSummary, CliError> {
    let cfg = RunConfig::load(config, sets)?;
    let ckpt = resume.map(checkpoint::load).transpose()?;
    match (cfg.dtype, ckpt) {
        (DType::F32, None) => run_train::<f32>(&cfg, None, verbose),
        (DType::F64, None) => run_train::<f64>(&cfg, None, verbose),
        (DType::F32, Some(AnyCheckpoint::F32(c))) => run_train(&cfg, Some(c), verbose),
        (DType::F64, Some(AnyCheckpoint::F64(c))) => run_train(&cfg, Some(c), verbose),
        (want, Some(c)) => Err(CliError::Config(format!(
            "checkpoint is {} but model.dtype is {}",
            c.dtype().name(),
            want.name()
        ))),
    }
}

/// Keeps the header and the rows of steps before `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<String, CliError> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(format!("{}\n", StepMetrics::CSV_HEADER));
    };
    let mut kept = format!("{}\n", StepMetrics::CSV_HEADER);
    for line in text.lines().skip(1) {
        let s = line.split(',').next().and_then(|f| f.parse::<u64>().ok());
        if s.is_some_and(|s| s < step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

pub fn run_train<T: Real>(
    cfg: &RunConfig,
    resume: Option<Checkpoint<T>>,
    verbose: bool,
) -> Result<TrainSummary, CliError> {
    let mut data = build_dataset::<T>(cfg)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut trainer = match resume {
        Some(c) => {
            if c.model.spec() != &cfg.spec {
                return Err(CliError::Config("checkpoint model does not match the configured model".into()));
            }
            let prefix = truncate_metrics(&metrics_path, c.step)?;
            fs::write(&metrics_path, prefix)?;
            Trainer::resume(c.model, c.opt, cfg.train.clone(), c.step, c.epoch)?
        }
        None => {
            fs::write(&metrics_path, format!("{}\n", StepMetrics::CSV_HEADER))?;
            Trainer::new(NbmModel::init(cfg.spec.clone(), cfg.init_seed)?, cfg.train.clone())?
        }
    };
    fs::write(dir.join(RESOLVED_FILE), cfg.resolved_toml())?;

    let mut csv = BufWriter::new(File::options().append(true).open(&metrics_path)?);
    let mut io_err = None;
    let mut last = None;
    let start = Instant::now();
    let result = trainer.fit(&mut data, |m| {
        if let Err(e) = writeln!(csv, "{}", m.csv_row()) {
            io_err.get_or_insert(e);
        }
        if verbose && last.map_or(true, |l: StepMetrics| l.epoch != m.epoch) {
            eprintln!("epoch {} step {} ({:.1}s)", m.epoch, m.step, start.elapsed().as_secs_f64());
        }
        last = Some(*m);
    });
    csv.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let snapshot = |t: &Trainer<T>| Checkpoint {
        model: t.model().clone(),
        opt: t.opt_state().clone(),
        step: t.step(),
        epoch: t.epoch(),
    };
    if let Err(e) = result {
        let err = CliError::from(e);
        if matches!(err, CliError::Numeric(_)) {
            checkpoint::save(&dir.join(PARTIAL_FILE), &snapshot(&trainer))?;
            eprintln!("numeric failure at step {}; last good state in {PARTIAL_FILE}", trainer.step());
        }
        return Err(err);
    }
    checkpoint::save(&dir.join(MODEL_FILE), &snapshot(&trainer))?;
    Ok(TrainSummary {
        output_dir: dir.clone(),
        steps: trainer.step(),
        epochs: trainer.epoch(),
        last,
    })
}

/// One conditional parameter set per label, from one-hot inputs.
pub fn label_params<T: Real>(model: &NbmModel<T>, labels: &[usize]) -> Result<Vec<CondParams<T>>, CliError> {
    let n_x = model.spec().n_x;
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_x) {
        return Err(CliError::Config(format!("label {bad} out of range for {n_x} classes")));
    }
    let x: Tensor<T> = one_hot(labels, n_x)?;
    Ok(model.condition_params(&x)?)
}

/// `per_label` chains for every label; row `s * labels.len() + c` is sample
/// `s` of label `labels[c]` and uses chain stream of the same index.
pub fn sample_labels<T: Real>(
    model: &NbmModel<T>,
    labels: &[usize],
    per_label: usize,
    opts: &SampleOptions,
    seed: u64,
) -> Result<Tensor<T>, CliError> {
    let params = label_params(model, labels)?;
    let all: Vec<CondParams<T>> = (0..per_label).flat_map(|_| params.iter().cloned()).collect();
    Ok(sample_batch(&all, opts, model.spec().visible_kind, seed, 0)?)
}

fn visible_range(kind: VisibleKind) -> (f64, f64) {
    match kind {
        VisibleKind::Gaussian => (-0.5, 0.5),
        VisibleKind::Ising => (-1.0, 1.0),
    }
}

fn fixed_tile<T: Real>(row: &[T], kind: VisibleKind) -> Vec<u8> {
    let (lo, hi) = visible_range(kind);
    row.iter().map(|v| map_fixed(v.as_f64(), lo, hi)).collect()
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub labels: Option<Vec<usize>>,
    pub per_label: usize,
    pub k_steps: usize,
    pub mean: bool,
    pub seed: u64,
    pub init_mode: InitMode,
}

fn resolve_labels(labels: &Option<Vec<usize>>, n_x: usize) -> Vec<usize> {
    labels.clone().unwrap_or_else(|| (0..n_x).collect())
}

/// Samples grid: one column per label, one row per sample.
pub fn sample_grid<T: Real>(model: &NbmModel<T>, args: &SampleArgs) -> Result<Grid, CliError> {
    let labels = resolve_labels(&args.labels, model.spec().n_x);
    if labels.is_empty() || args.per_label == 0 {
        return Err(CliError::Config("need at least one label and one sample per label".into()));
    }
    let opts = SampleOptions {
        init_mode: args.init_mode,
        ..SampleOptions::new(args.k_steps).with_final_mean(args.mean)
    };
    let ys = sample_labels(model, &labels, args.per_label, &opts, args.seed)?;
    let (tw, th) = tile_shape(model.spec().n_y);
    let mut grid = Grid::new(args.per_label, labels.len(), tw, th);
    let kind = model.spec().visible_kind;
    for s in 0..args.per_label {
        for c in 0..labels.len() {
            grid.put(s, c, &fixed_tile(ys.row(s * labels.len() + c), kind));
        }
    }
    Ok(grid)
}

/// Four rows per label: a mean-mode sample, the bias, the variance `1/prec`
/// and the coupling matrix averaged over hidden units. The last two are
/// stretched per tile.
pub fn inspect_grid<T: Real>(model: &NbmModel<T>, args: &SampleArgs) -> Result<Grid, CliError> {
    let spec = model.spec();
    let labels = resolve_labels(&args.labels, spec.n_x);
    if labels.is_empty() {
        return Err(CliError::Config("need at least one label".into()));
    }
    let opts = SampleOptions {
        init_mode: args.init_mode,
        ..SampleOptions::new(args.k_steps).with_final_mean(true)
    };
    let ys = sample_labels(model, &labels, 1, &opts, args.seed)?;
    let params = label_params(model, &labels)?;
    let (tw, th) = tile_shape(spec.n_y);
    let mut grid = Grid::new(4, labels.len(), tw, th);
    for (c, p) in params.iter().enumerate() {
        grid.put(0, c, &fixed_tile(ys.row(c), spec.visible_kind));
        grid.put(1, c, &fixed_tile(p.mu(), spec.visible_kind));
        let var: Vec<f64> = p.prec().iter().map(|v| 1.0 / v.as_f64()).collect();
        grid.put(2, c, &map_minmax(&var));
        let n_h = p.n_h();
        let w_mean: Vec<f64> = p
            .w()
            .chunks_exact(n_h)
            .map(|r| r.iter().map(|v| v.as_f64()).sum::<f64>() / n_h as f64)
            .collect();
        grid.put(3, c, &map_minmax(&w_mean));
    }
    Ok(grid)
}

pub fn sample(ckpt: &Path, args: &SampleArgs, out: &Path) -> Result<(), CliError> {
    let grid = match checkpoint::load(ckpt)? {
        AnyCheckpoint::F32(c) => sample_grid(&c.model, args)?,
        AnyCheckpoint::F64(c) => sample_grid(&c.model, args)?,
    };
    grid.image.save(out)
}

pub fn inspect(ckpt: &Path, args: &SampleArgs, out: &Path) -> Result<(), CliError> {
    let grid = match checkpoint::load(ckpt)? {
        AnyCheckpoint::F32(c) => inspect_grid(&c.model, args)?,
        AnyCheckpoint::F64(c) => inspect_grid(&c.model, args)?,
    };
    grid.image.save(out)
}

/// `nbm check`: prints one line per check; fails if any check does.
pub fn check(fast: bool, faults: Faults, seed: u64, out: &mut impl Write) -> Result<(), CliError> {
    let results = run_suite(SuiteOptions { fast, faults, seed });
    for r in &results {
        writeln!(out, "{r}")?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    writeln!(out, "{} passed, {failed} failed", results.len() - failed)?;
    if failed > 0 {
        Err(CliError::ChecksFailed(failed))
    } else {
        Ok(())
    }
}
