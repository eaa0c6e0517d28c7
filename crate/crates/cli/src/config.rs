//! Run configuration: a TOML file of flat dotted keys (`model.n_h = 64`),
//! overridden by `--set key=value` flags, on top of built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nbm::data::{BimodalSpec, NoiseMode, SynthSpec};
use nbm::{DType, InitMode, NbmSpec, PenaltyMode, TrainConfig, VisibleKind};
use toml::Value;

use crate::error::CliError;

/// Where the training pairs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        limit: Option<usize>,
        n_classes: usize,
        noise_var: f64,
        noise_mode: NoiseMode,
        noise_seed: u64,
        threshold: f64,
    },
    SynthGaussian {
        spec: SynthSpec,
        seed: u64,
    },
    SynthBimodal {
        spec: BimodalSpec,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: NbmSpec,
    pub hidden: usize,
    pub dtype: DType,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub data: DataSource,
    pub output_dir: PathBuf,
}

type Flat = BTreeMap<String, Value>;

fn flatten(prefix: &str, table: &toml::Table, out: &mut Flat) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Parses `key=value`; the value is read as a TOML value, or as a bare
/// string if that fails.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

struct Keys {
    flat: Flat,
    base: PathBuf,
}

impl Keys {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.flat.remove(key)
    }

    fn err(key: &str, want: &str, v: &Value) -> CliError {
        CliError::Config(format!("`{key}` must be {want}, found {v}"))
    }

    fn uint(&mut self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Integer(i)) if i >= 0 => Ok(i as u64),
            Some(v) => Err(Self::err(key, "a non-negative integer", &v)),
        }
    }

    fn opt_uint(&mut self, key: &str) -> Result<Option<u64>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if i >= 0 => Ok(Some(i as u64)),
            Some(v) => Err(Self::err(key, "a non-negative integer", &v)),
        }
    }

    fn float(&mut self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Float(f)) => Ok(f),
            Some(Value::Integer(i)) => Ok(i as f64),
            Some(v) => Err(Self::err(key, "a number", &v)),
        }
    }

    fn boolean(&mut self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(b),
            Some(v) => Err(Self::err(key, "true or false", &v)),
        }
    }

    fn string(&mut self, key: &str) -> Result<Option<String>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(Self::err(key, "a string", &v)),
        }
    }

    fn parsed<T: std::str::FromStr<Err = nbm::Error>>(&mut self, key: &str, default: T) -> Result<T, CliError> {
        match self.string(key)? {
            None => Ok(default),
            Some(s) => s.parse().map_err(CliError::from),
        }
    }

    fn path(&mut self, key: &str) -> Result<Option<PathBuf>, CliError> {
        Ok(self.string(key)?.map(|s| self.base.join(s)))
    }

    fn matrix(&mut self, key: &str) -> Result<Option<Vec<Vec<f64>>>, CliError> {
        let Some(v) = self.take(key) else {
            return Ok(None);
        };
        let bad = || Self::err(key, "an array of number arrays", &v);
        let rows = v.as_array().ok_or_else(bad)?;
        rows.iter()
            .map(|r| {
                r.as_array()
                    .ok_or_else(bad)?
                    .iter()
                    .map(|x| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)).ok_or_else(bad))
                    .collect()
            })
            .collect::<Result<_, _>>()
            .map(Some)
    }
}

impl RunConfig {
    /// Reads `path`, applies `overrides`, resolves relative paths against the
    /// config file's directory and validates everything.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str_with(&text, &base, overrides)
    }

    pub fn from_str_with(text: &str, base: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("config is not valid TOML: {e}")))?;
        let mut flat = Flat::new();
        flatten("", &table, &mut flat);
        for o in overrides {
            let (k, v) = parse_override(o)?;
            flat.insert(k, v);
        }
        let mut keys = Keys {
            flat,
            base: base.to_path_buf(),
        };
        let cfg = Self::resolve(&mut keys)?;
        if let Some(k) = keys.flat.keys().next() {
            return Err(CliError::Config(format!("unknown config key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(k: &mut Keys) -> Result<Self, CliError> {
        let kind: VisibleKind = k.parsed("model.kind", VisibleKind::Gaussian)?;
        let data = match k.string("data.source")?.as_deref().unwrap_or("idx") {
            "idx" => DataSource::Idx {
                images: k
                    .path("data.images")?
                    .ok_or_else(|| CliError::Config("`data.images` is required for idx data".into()))?,
                labels: k
                    .path("data.labels")?
                    .ok_or_else(|| CliError::Config("`data.labels` is required for idx data".into()))?,
                limit: k.opt_uint("data.limit")?.map(|v| v as usize),
                n_classes: k.uint("data.n_classes", 10)? as usize,
                noise_var: k.float("data.noise_var", 0.001)?,
                noise_mode: k.parsed("data.noise_mode", NoiseMode::Static)?,
                noise_seed: k.uint("data.noise_seed", 0)?,
                threshold: k.float("data.threshold", 0.5)?,
            },
            "synth_gaussian" => DataSource::SynthGaussian {
                spec: SynthSpec {
                    class_means: k
                        .matrix("data.class_means")?
                        .ok_or_else(|| CliError::Config("`data.class_means` is required".into()))?,
                    class_variances: k
                        .matrix("data.class_variances")?
                        .ok_or_else(|| CliError::Config("`data.class_variances` is required".into()))?,
                    samples_per_class: k.uint("data.samples_per_class", 1000)? as usize,
                },
                seed: k.uint("data.seed", 0)?,
            },
            "synth_bimodal" => {
                let mut spec = BimodalSpec::new(
                    k.float("data.center", 2.0)?,
                    k.uint("data.n_y", 2)? as usize,
                    k.uint("data.samples", 10_000)? as usize,
                );
                spec.variance = k.float("data.variance", spec.variance)?;
                spec.mix_weight = k.float("data.mix_weight", spec.mix_weight)?;
                DataSource::SynthBimodal {
                    spec,
                    seed: k.uint("data.seed", 0)?,
                }
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown data.source `{other}` (idx | synth_gaussian | synth_bimodal)"
                )))
            }
        };
        let (n_x, n_y) = match &data {
            DataSource::Idx { images, labels, n_classes, .. } => {
                for p in [images, labels] {
                    if !p.is_file() {
                        return Err(CliError::Config(format!("data file {} does not exist", p.display())));
                    }
                }
                let set = nbm::data::load_images(images)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", images.display())))?;
                (*n_classes, set.pixels_per_image())
            }
            DataSource::SynthGaussian { spec, .. } => (spec.class_means.len(), spec.class_means.first().map_or(0, Vec::len)),
            DataSource::SynthBimodal { spec, .. } => (1, spec.n_y),
        };
        let hidden = k.uint("model.hidden", 32)? as usize;
        let mut spec = NbmSpec::standard(n_x, n_y, k.uint("model.n_h", 64)? as usize, kind, hidden);
        spec.tanh_bias = k.boolean("model.tanh_bias", spec.tanh_bias)?;
        spec.scale_weights = k.boolean("model.scale_weights", spec.scale_weights)?;
        let dtype = match k.string("model.dtype")?.as_deref().unwrap_or("f32") {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(CliError::Config(format!("unknown model.dtype `{other}` (f32 | f64)"))),
        };
        let d = TrainConfig::defaults(kind);
        let train = TrainConfig {
            learning_rate: k.float("train.learning_rate", d.learning_rate)?,
            batch_size: k.uint("train.batch_size", d.batch_size as u64)? as usize,
            epochs: k.uint("train.epochs", d.epochs)?,
            k_steps: k.uint("train.k_steps", d.k_steps as u64)? as usize,
            l2_w: k.float("train.l2_w", d.l2_w)?,
            l2_mu: k.float("train.l2_mu", d.l2_mu)?,
            l2_prec: k.float("train.l2_prec", d.l2_prec)?,
            beta1: k.float("train.beta1", d.beta1)?,
            beta2: k.float("train.beta2", d.beta2)?,
            eps: k.float("train.eps", d.eps)?,
            seed: k.uint("train.seed", d.seed)?,
            penalty_mode: k.parsed("train.penalty_mode", PenaltyMode::Outputs)?,
            max_steps: k.opt_uint("train.max_steps")?,
            init_mode: k.parsed("train.init_mode", InitMode::Draw)?,
        };
        Ok(Self {
            spec,
            hidden,
            dtype,
            init_seed: k.uint("model.seed", 0)?,
            train,
            data,
            output_dir: k.path("output_dir")?.unwrap_or_else(|| k.base.join("run")),
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.spec.validate()?;
        self.train.validate()?;
        match &self.data {
            DataSource::Idx {
                n_classes,
                noise_var,
                threshold,
                ..
            } => {
                if *n_classes == 0 || !(*noise_var >= 0.0) || !(0.0..=1.0).contains(threshold) {
                    return Err(CliError::Config(
                        "need n_classes >= 1, noise_var >= 0 and threshold in [0, 1]".into(),
                    ));
                }
            }
            DataSource::SynthGaussian { spec, .. } => {
                spec.validate()?;
                if self.spec.visible_kind != VisibleKind::Gaussian {
                    return Err(CliError::Config("synthetic gaussian data needs model.kind = \"gaussian\"".into()));
                }
            }
            DataSource::SynthBimodal { spec, .. } => {
                spec.validate()?;
                if self.spec.visible_kind != VisibleKind::Gaussian {
                    return Err(CliError::Config("synthetic bimodal data needs model.kind = \"gaussian\"".into()));
                }
            }
        }
        Ok(())
    }

    /// Every setting, as flat dotted keys with absolute paths; loading it
    /// back yields this configuration.
    pub fn resolved_toml(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: Value| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let path = |p: &Path| Value::String(absolute(p).display().to_string());
        let int = |v: u64| Value::Integer(v as i64);
        let spec = &self.spec;
        line("output_dir", path(&self.output_dir));
        line("model.kind", Value::String(spec.visible_kind.name().into()));
        line("model.n_h", int(spec.n_h as u64));
        line("model.hidden", int(self.hidden as u64));
        line("model.tanh_bias", Value::Boolean(spec.tanh_bias));
        line("model.scale_weights", Value::Boolean(spec.scale_weights));
        line("model.dtype", Value::String(self.dtype.name().into()));
        line("model.seed", int(self.init_seed));
        let t = &self.train;
        line("train.learning_rate", Value::Float(t.learning_rate));
        line("train.batch_size", int(t.batch_size as u64));
        line("train.epochs", int(t.epochs));
        line("train.k_steps", int(t.k_steps as u64));
        line("train.l2_w", Value::Float(t.l2_w));
        line("train.l2_mu", Value::Float(t.l2_mu));
        line("train.l2_prec", Value::Float(t.l2_prec));
        line("train.beta1", Value::Float(t.beta1));
        line("train.beta2", Value::Float(t.beta2));
        line("train.eps", Value::Float(t.eps));
        line("train.seed", int(t.seed));
        line("train.penalty_mode", Value::String(t.penalty_mode.name().into()));
        if let Some(m) = t.max_steps {
            line("train.max_steps", int(m));
        }
        line("train.init_mode", Value::String(t.init_mode.name().into()));
        let floats = |rows: &[Vec<f64>]| {
            Value::Array(
                rows.iter()
                    .map(|r| Value::Array(r.iter().map(|&v| Value::Float(v)).collect()))
                    .collect(),
            )
        };
        match &self.data {
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
                line("data.source", Value::String("idx".into()));
                line("data.images", path(images));
                line("data.labels", path(labels));
                if let Some(l) = limit {
                    line("data.limit", int(*l as u64));
                }
                line("data.n_classes", int(*n_classes as u64));
                line("data.noise_var", Value::Float(*noise_var));
                line("data.noise_mode", Value::String(noise_mode.name().into()));
                line("data.noise_seed", int(*noise_seed));
                line("data.threshold", Value::Float(*threshold));
            }
            DataSource::SynthGaussian { spec, seed } => {
                line("data.source", Value::String("synth_gaussian".into()));
                line("data.class_means", floats(&spec.class_means));
                line("data.class_variances", floats(&spec.class_variances));
                line("data.samples_per_class", int(spec.samples_per_class as u64));
                line("data.seed", int(*seed));
            }
            DataSource::SynthBimodal { spec, seed } => {
                line("data.source", Value::String("synth_bimodal".into()));
                line("data.center", Value::Float(spec.center));
                line("data.n_y", int(spec.n_y as u64));
                line("data.samples", int(spec.samples as u64));
                line("data.variance", Value::Float(spec.variance));
                line("data.mix_weight", Value::Float(spec.mix_weight));
                line("data.seed", int(*seed));
            }
        }
        s
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"
output_dir = "out"
model.n_h = 8
model.hidden = 16
train.epochs = 3
[data]
source = "synth_gaussian"
class_means = [[0.0, 1.0], [1.0, 0.0]]
class_variances = [[1.0, 1.0], [0.5, 0.5]]
samples_per_class = 50
"#;

    #[test]
    fn defaults_fill_unset_keys() {
        let c = RunConfig::from_str_with(SYNTH, Path::new("/tmp"), &[]).unwrap();
        assert_eq!(c.spec.n_h, 8);
        assert_eq!((c.spec.n_x, c.spec.n_y), (2, 2));
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.learning_rate, 0.0005);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.output_dir, Path::new("/tmp/out"));
    }

    #[test]
    fn flags_beat_file() {
        let c = RunConfig::from_str_with(
            SYNTH,
            Path::new("/tmp"),
            &["train.epochs=7".into(), "train.penalty_mode=weight_decay".into()],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.penalty_mode, PenaltyMode::WeightDecay);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_str_with(SYNTH, Path::new("/tmp"), &["train.epoch=1".into()]).unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn missing_idx_file_is_config_error() {
        let text = "data.images = \"nope.gz\"\ndata.labels = \"nope.gz\"\n";
        let e = RunConfig::from_str_with(text, Path::new("/nonexistent"), &[]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let c = RunConfig::from_str_with(SYNTH, Path::new("/tmp"), &["model.dtype=\"f64\"".into()]).unwrap();
        let again = RunConfig::from_str_with(&c.resolved_toml(), Path::new("/elsewhere"), &[]).unwrap();
        assert_eq!(c, again);
    }
}
