//! Datasets: IDX ingestion, image preprocessing and synthetic generators.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::VisibleKind;
use crate::rng::mix_seed;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Magic of an unsigned-byte, rank-1 IDX array (labels).
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Magic of an unsigned-byte, rank-3 IDX array (images).
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// An unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses a big-endian IDX buffer holding labels or images.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Length {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    let ndim = match magic {
        IDX_LABELS_MAGIC => 1,
        IDX_IMAGES_MAGIC => 3,
        other => return Err(Error::Format(format!("bad IDX magic 0x{other:08x}"))),
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Length {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() != header + payload {
        return Err(Error::Length {
            expected: header + payload,
            found: bytes.len(),
        });
    }
    Ok(IdxArray {
        magic,
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Reads an IDX file, transparently gunzipping `.gz` content.
pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let raw = fs::read(path.as_ref())?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        parse_idx(&out)
    } else {
        parse_idx(&raw)
    }
}

/// `count` grayscale images of `rows × cols` bytes, stored contiguously.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl ImageSet {
    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.pixels_per_image();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// First `n` images.
    pub fn truncate(&mut self, n: usize) {
        self.count = self.count.min(n);
        self.pixels.truncate(self.count * self.pixels_per_image());
    }
}

impl TryFrom<IdxArray> for ImageSet {
    type Error = Error;

    fn try_from(a: IdxArray) -> Result<Self> {
        if a.magic != IDX_IMAGES_MAGIC {
            return Err(Error::Format(format!(
                "expected image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{:08x}",
                a.magic
            )));
        }
        Ok(Self {
            count: a.dims[0],
            rows: a.dims[1],
            cols: a.dims[2],
            pixels: a.data,
        })
    }
}

pub fn load_images(path: impl AsRef<Path>) -> Result<ImageSet> {
    load_idx(path)?.try_into()
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let a = load_idx(path)?;
    if a.magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "expected label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{:08x}",
            a.magic
        )));
    }
    Ok(a.data)
}

/// `pixel / 255 - 0.5` plus Gaussian noise of the given variance, one row
/// per image. The noise stream is fully determined by `noise_seed`.
pub fn preprocess_gaussian<T: Real>(
    pixels: &[u8],
    pixels_per_image: usize,
    noise_var: f64,
    noise_seed: u64,
) -> Result<Tensor<T>> {
    let n = image_count(pixels, pixels_per_image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let sd = noise_var.sqrt();
    let data = pixels
        .iter()
        .map(|&p| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(p as f64 / 255.0 - 0.5 + sd * z)
        })
        .collect();
    Tensor::matrix(n, pixels_per_image, data)
}

/// `+1` where `pixel / 255 > threshold`, else `-1`.
pub fn preprocess_ising<T: Real>(
    pixels: &[u8],
    pixels_per_image: usize,
    threshold: f64,
) -> Result<Tensor<T>> {
    let n = image_count(pixels, pixels_per_image)?;
    let data = pixels
        .iter()
        .map(|&p| {
            if p as f64 / 255.0 > threshold {
                T::one()
            } else {
                -T::one()
            }
        })
        .collect();
    Tensor::matrix(n, pixels_per_image, data)
}

fn image_count(pixels: &[u8], per_image: usize) -> Result<usize> {
    if per_image == 0 || pixels.len() % per_image != 0 {
        return Err(Error::Data(format!(
            "{} pixels do not split into images of {per_image}",
            pixels.len()
        )));
    }
    Ok(pixels.len() / per_image)
}

pub fn one_hot<T: Real>(labels: &[usize], n_classes: usize) -> Result<Tensor<T>> {
    let mut x = Tensor::zeros(&[labels.len(), n_classes]);
    for (r, &c) in labels.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::Data(format!(
                "label {c} out of range for {n_classes} classes"
            )));
        }
        x.row_mut(r)[c] = T::one();
    }
    Ok(x)
}

/// When the Gaussian preprocessing noise is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// Once, at load time.
    #[default]
    Static,
    /// Redrawn at the start of every epoch.
    PerEpoch,
}

impl NoiseMode {
    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Static => "static",
            NoiseMode::PerEpoch => "per_epoch",
        }
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(NoiseMode::Static),
            "per_epoch" => Ok(NoiseMode::PerEpoch),
            other => Err(Error::Config(format!(
                "unknown noise mode `{other}` (static | per_epoch)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
struct EpochNoise<T> {
    clean: Tensor<T>,
    sd: f64,
    seed: u64,
}

/// Paired conditioning inputs and visible targets.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub kind: VisibleKind,
    pub meta: String,
    noise: Option<EpochNoise<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn new(x: Tensor<T>, y: Tensor<T>, kind: VisibleKind, meta: impl Into<String>) -> Result<Self> {
        if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
            return Err(Error::Data(format!(
                "x {:?} and y {:?} must be matrices with equal row counts",
                x.shape(),
                y.shape()
            )));
        }
        if kind == VisibleKind::Ising
            && y.data().iter().any(|&v| v != T::one() && v != -T::one())
        {
            return Err(Error::Data("ising targets must be ±1".into()));
        }
        Ok(Self {
            x,
            y,
            kind,
            meta: meta.into(),
            noise: None,
        })
    }

    /// Gaussian-visible image dataset conditioned on one-hot labels.
    pub fn gaussian_images(
        images: &ImageSet,
        labels: &[u8],
        n_classes: usize,
        noise_var: f64,
        noise_mode: NoiseMode,
        noise_seed: u64,
    ) -> Result<Self> {
        let x = labels_to_one_hot(images, labels, n_classes)?;
        let ppi = images.pixels_per_image();
        let y = preprocess_gaussian(&images.pixels, ppi, noise_var, noise_seed)?;
        let meta = format!("{} gaussian images, noise var {noise_var}", images.count);
        let mut ds = Self::new(x, y, VisibleKind::Gaussian, meta)?;
        if noise_mode == NoiseMode::PerEpoch {
            ds.noise = Some(EpochNoise {
                clean: preprocess_gaussian(&images.pixels, ppi, 0.0, 0)?,
                sd: noise_var.sqrt(),
                seed: noise_seed,
            });
        }
        Ok(ds)
    }

    pub fn ising_images(images: &ImageSet, labels: &[u8], n_classes: usize, threshold: f64) -> Result<Self> {
        let x = labels_to_one_hot(images, labels, n_classes)?;
        let y = preprocess_ising(&images.pixels, images.pixels_per_image(), threshold)?;
        let meta = format!("{} ising images, threshold {threshold}", images.count);
        Self::new(x, y, VisibleKind::Ising, meta)
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_x(&self) -> usize {
        self.x.cols()
    }

    pub fn n_y(&self) -> usize {
        self.y.cols()
    }

    pub fn noise_mode(&self) -> NoiseMode {
        if self.noise.is_some() {
            NoiseMode::PerEpoch
        } else {
            NoiseMode::Static
        }
    }

    /// Redraws the preprocessing noise for `epoch`; no-op for static noise.
    pub fn refresh_noise(&mut self, epoch: u64) {
        let Some(noise) = &self.noise else { return };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(noise.seed, epoch + 1));
        for (out, &c) in self.y.data_mut().iter_mut().zip(noise.clean.data()) {
            let z: f64 = rng.sample(StandardNormal);
            *out = T::lit(c.as_f64() + noise.sd * z);
        }
    }

    pub fn select(&self, idx: &[usize]) -> (Tensor<T>, Tensor<T>) {
        (self.x.select_rows(idx), self.y.select_rows(idx))
    }
}

fn labels_to_one_hot<T: Real>(images: &ImageSet, labels: &[u8], n_classes: usize) -> Result<Tensor<T>> {
    if labels.len() != images.count {
        return Err(Error::Data(format!(
            "{} labels for {} images",
            labels.len(),
            images.count
        )));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    one_hot(&labels, n_classes)
}

/// Class-conditional diagonal Gaussians: class `c` draws from
/// `N(class_means[c], diag(class_variances[c]))` with `x = e_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub class_means: Vec<Vec<f64>>,
    pub class_variances: Vec<Vec<f64>>,
    pub samples_per_class: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let n_y = self.class_means.first().map(Vec::len).unwrap_or(0);
        if self.class_means.is_empty() || n_y == 0 {
            return Err(Error::Config("synthetic task needs at least one class mean".into()));
        }
        if self.class_variances.len() != self.class_means.len()
            || self
                .class_means
                .iter()
                .chain(&self.class_variances)
                .any(|v| v.len() != n_y)
        {
            return Err(Error::Config(
                "class means and variances must all have the same length".into(),
            ));
        }
        if self.class_variances.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("class variances must be positive".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn n_y(&self) -> usize {
        self.class_means[0].len()
    }
}

/// Rows are grouped by class; training shuffles them.
pub fn synth_gaussian_classes<T: Real>(spec: &SynthSpec, seed: u64) -> Result<Dataset<T>> {
    spec.validate()?;
    let (k, n_y, per) = (spec.n_classes(), spec.n_y(), spec.samples_per_class);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(k * per);
    let mut y = Vec::with_capacity(k * per * n_y);
    for (c, (mean, var)) in spec.class_means.iter().zip(&spec.class_variances).enumerate() {
        for _ in 0..per {
            labels.push(c);
            for (m, v) in mean.iter().zip(var) {
                let z: f64 = rng.sample(StandardNormal);
                y.push(T::lit(m + v.sqrt() * z));
            }
        }
    }
    Dataset::new(
        one_hot(&labels, k)?,
        Tensor::matrix(k * per, n_y, y)?,
        VisibleKind::Gaussian,
        format!("synthetic gaussian, {k} classes x {per}"),
    )
}

/// Two isotropic Gaussian modes at `±center · 1`, single conditioning class.
#[derive(Debug, Clone, PartialEq)]
pub struct BimodalSpec {
    pub center: f64,
    pub n_y: usize,
    pub variance: f64,
    /// Probability of the `+center` mode.
    pub mix_weight: f64,
    pub samples: usize,
}

impl BimodalSpec {
    pub fn new(center: f64, n_y: usize, samples: usize) -> Self {
        Self {
            center,
            n_y,
            variance: 0.05,
            mix_weight: 0.5,
            samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.center >= 0.0) || !(self.variance > 0.0) || self.n_y == 0 || self.samples == 0 {
            return Err(Error::Config(
                "bimodal task needs center >= 0, variance > 0, n_y >= 1, samples >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(Error::Config("mix weight must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn synth_bimodal<T: Real>(spec: &BimodalSpec, seed: u64) -> Result<Dataset<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = spec.variance.sqrt();
    let mut y = Vec::with_capacity(spec.samples * spec.n_y);
    for _ in 0..spec.samples {
        let c = if rng.random::<f64>() < spec.mix_weight {
            spec.center
        } else {
            -spec.center
        };
        for _ in 0..spec.n_y {
            let z: f64 = rng.sample(StandardNormal);
            y.push(T::lit(c + sd * z));
        }
    }
    Dataset::new(
        Tensor::from_vec(&[spec.samples, 1], vec![T::one(); spec.samples])?,
        Tensor::matrix(spec.samples, spec.n_y, y)?,
        VisibleKind::Gaussian,
        format!("synthetic bimodal, centers ±{}", spec.center),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, payload: usize) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for d in [n, 28, 28] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(7u8, payload));
        b
    }

    #[test]
    fn parses_image_header() {
        let a = parse_idx(&idx_images(2, 1568)).unwrap();
        assert_eq!(a.dims, vec![2, 28, 28]);
        let set = ImageSet::try_from(a).unwrap();
        assert_eq!(set.count, 2);
        assert_eq!(set.image(1).len(), 784);
    }

    #[test]
    fn parses_labels() {
        let mut b = vec![0, 0, 8, 1];
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&[3, 7]);
        let a = parse_idx(&b).unwrap();
        assert_eq!(a.dims, vec![2]);
        assert_eq!(a.data, vec![3, 7]);
    }

    #[test]
    fn truncated_payload_is_length_error() {
        assert!(matches!(
            parse_idx(&idx_images(2, 1000)),
            Err(Error::Length { expected: 1584, found: 1016 })
        ));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Length { .. })));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut b = idx_images(1, 784);
        b[3] = 0x02;
        assert!(matches!(parse_idx(&b), Err(Error::Format(_))));
    }

    #[test]
    fn gaussian_preprocessing_endpoints() {
        let y = preprocess_gaussian::<f64>(&[0, 255], 2, 0.0, 1).unwrap();
        assert_eq!(y.data(), &[-0.5, 0.5]);
        let a = preprocess_gaussian::<f32>(&[0, 128, 255, 3], 2, 0.001, 9).unwrap();
        let b = preprocess_gaussian::<f32>(&[0, 128, 255, 3], 2, 0.001, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ising_preprocessing() {
        let y = preprocess_ising::<f64>(&[0, 255, 128, 127], 4, 0.5).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0, 1.0, -1.0]);
        let blank = preprocess_ising::<f64>(&[0; 784], 784, 0.5).unwrap();
        assert!(blank.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn one_hot_rows() {
        let x = one_hot::<f64>(&[3], 10).unwrap();
        assert_eq!(x.data(), &[0., 0., 0., 1., 0., 0., 0., 0., 0., 0.]);
        let x = one_hot::<f64>(&[0, 9], 10).unwrap();
        assert_eq!(x.row(0)[0], 1.0);
        assert_eq!(x.row(1)[9], 1.0);
        assert!(x.data().chunks(10).all(|r| r.iter().sum::<f64>() == 1.0));
        assert!(matches!(one_hot::<f64>(&[10], 10), Err(Error::Data(_))));
    }

    #[test]
    fn ising_dataset_rejects_non_spins() {
        let x = Tensor::<f64>::zeros(&[1, 1]);
        let y = Tensor::from_f64(&[1, 2], &[1.0, 0.5]).unwrap();
        assert!(Dataset::new(x, y, VisibleKind::Ising, "").is_err());
    }

    #[test]
    fn per_epoch_noise_changes_between_epochs() {
        let images = ImageSet {
            count: 2,
            rows: 2,
            cols: 2,
            pixels: vec![0, 50, 100, 150, 200, 250, 255, 1],
        };
        let mut ds = Dataset::<f64>::gaussian_images(&images, &[0, 1], 2, 0.001, NoiseMode::PerEpoch, 3).unwrap();
        ds.refresh_noise(0);
        let e0 = ds.y.clone();
        ds.refresh_noise(1);
        assert_ne!(e0, ds.y);
        ds.refresh_noise(0);
        assert_eq!(e0, ds.y);
    }

    #[test]
    fn bimodal_degenerates_to_unimodal() {
        let ds = synth_bimodal::<f64>(&BimodalSpec::new(0.0, 2, 2000), 4).unwrap();
        let mean = ds.y.data().iter().sum::<f64>() / ds.y.len() as f64;
        assert!(mean.abs() < 4.0 * (0.05f64 / 4000.0).sqrt());
        assert!(ds.x.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn synth_validation() {
        let bad = SynthSpec {
            class_means: vec![vec![0.0, 1.0]],
            class_variances: vec![vec![1.0, 0.0]],
            samples_per_class: 3,
        };
        assert!(synth_gaussian_classes::<f64>(&bad, 0).is_err());
    }
}
