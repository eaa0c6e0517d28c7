//! Block Gibbs sampling of `p(y, h | x)`.
//!
//! Both conditionals factorize over units:
//!
//! - `h | y ~ Ising(W'(y - μ))`
//! - Gaussian visibles: `y | h ~ N(μ + P⁻¹Wh, P⁻¹)`
//! - Ising visibles:    `y | h ~ Ising(Pμ + Wh)`
//!
//! where a ±1 spin in field `a` is `+1` with probability
//! `e^a / (e^a + e^-a) = σ(2a)`.

use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CondParams, VisibleKind};
use crate::rng::ChainRng;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Starting point of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    /// Draw `y0` from the visible conditional with zero hidden field.
    #[default]
    Draw,
    /// Start from the mean of that distribution.
    Mean,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Draw => "draw",
            InitMode::Mean => "mean",
        }
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "draw" => Ok(InitMode::Draw),
            "mean" => Ok(InitMode::Mean),
            other => Err(Error::Config(format!("unknown init mode `{other}` (mean | draw)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOptions {
    pub k_steps: usize,
    /// Return the conditional mean from the last visible update instead of a
    /// draw.
    pub final_mean: bool,
    pub init_mode: InitMode,
}

impl SampleOptions {
    pub fn new(k_steps: usize) -> Self {
        Self {
            k_steps,
            final_mean: false,
            init_mode: InitMode::Draw,
        }
    }

    pub fn with_final_mean(mut self, final_mean: bool) -> Self {
        self.final_mean = final_mean;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_steps == 0 {
            return Err(Error::Config("k_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `P(spin = +1)` in field `a`, i.e. `σ(2a) = (1 + tanh a) / 2`.
#[inline]
pub fn spin_up_probability(field: f64) -> f64 {
    0.5 * (1.0 + field.tanh())
}

#[inline]
fn draw_spin<T: Real, R: Rng + ?Sized>(field: T, rng: &mut R) -> T {
    if rng.random::<f64>() < spin_up_probability(field.as_f64()) {
        T::one()
    } else {
        -T::one()
    }
}

#[inline]
fn standard_normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

/// Draws `h | y`.
pub fn sample_hidden<T: Real, R: Rng + ?Sized>(p: &CondParams<T>, y: &[T], rng: &mut R) -> Vec<T> {
    p.hidden_field(y)
        .into_iter()
        .map(|a| draw_spin(a, rng))
        .collect()
}

/// Per-unit `P(h_j = +1 | y)`.
pub fn hidden_up_probabilities<T: Real>(p: &CondParams<T>, y: &[T]) -> Vec<f64> {
    p.hidden_field(y)
        .into_iter()
        .map(|a| spin_up_probability(a.as_f64()))
        .collect()
}

/// Field on Ising visibles, `Pμ + Wh`.
pub fn ising_visible_field<T: Real>(p: &CondParams<T>, h: &[T]) -> Vec<T> {
    let wh = p.coupling(h);
    (0..p.n_y())
        .map(|i| p.prec()[i] * p.mu()[i] + wh[i])
        .collect()
}

/// Per-unit `P(y_i = +1 | h)` for Ising visibles.
pub fn ising_visible_up_probabilities<T: Real>(p: &CondParams<T>, h: &[T]) -> Vec<f64> {
    ising_visible_field(p, h)
        .into_iter()
        .map(|b| spin_up_probability(b.as_f64()))
        .collect()
}

/// Mean of the Gaussian visible conditional, `μ + P⁻¹Wh`.
pub fn gaussian_visible_mean<T: Real>(p: &CondParams<T>, h: &[T]) -> Vec<T> {
    let wh = p.coupling(h);
    (0..p.n_y())
        .map(|i| p.mu()[i] + wh[i] / p.prec()[i])
        .collect()
}

pub fn sample_visible_gaussian<T: Real, R: Rng + ?Sized>(
    p: &CondParams<T>,
    h: &[T],
    rng: &mut R,
) -> Vec<T> {
    gaussian_visible_mean(p, h)
        .into_iter()
        .zip(p.prec())
        .map(|(m, &pi)| m + standard_normal::<T, _>(rng) / pi.sqrt())
        .collect()
}

pub fn sample_visible_ising<T: Real, R: Rng + ?Sized>(
    p: &CondParams<T>,
    h: &[T],
    rng: &mut R,
) -> Vec<T> {
    ising_visible_field(p, h)
        .into_iter()
        .map(|b| draw_spin(b, rng))
        .collect()
}

pub fn sample_visible<T: Real, R: Rng + ?Sized>(
    p: &CondParams<T>,
    h: &[T],
    kind: VisibleKind,
    rng: &mut R,
) -> Vec<T> {
    match kind {
        VisibleKind::Gaussian => sample_visible_gaussian(p, h, rng),
        VisibleKind::Ising => sample_visible_ising(p, h, rng),
    }
}

/// `E[y | h]`: `μ + P⁻¹Wh`, or `tanh(Pμ + Wh)` for Ising spins.
pub fn visible_mean<T: Real>(p: &CondParams<T>, h: &[T], kind: VisibleKind) -> Vec<T> {
    match kind {
        VisibleKind::Gaussian => gaussian_visible_mean(p, h),
        VisibleKind::Ising => ising_visible_field(p, h).into_iter().map(T::tanh).collect(),
    }
}

/// Chain start from the bias and precision alone: `N(μ, P⁻¹)` or
/// `Ising(Pμ)`, or the mean of that distribution.
pub fn init_chain<T: Real, R: Rng + ?Sized>(
    p: &CondParams<T>,
    kind: VisibleKind,
    mode: InitMode,
    rng: &mut R,
) -> Vec<T> {
    let zero_field = vec![T::zero(); p.n_h()];
    match mode {
        InitMode::Draw => sample_visible(p, &zero_field, kind, rng),
        InitMode::Mean => visible_mean(p, &zero_field, kind),
    }
}

/// State of one block Gibbs chain.
#[derive(Debug, Clone)]
pub struct GibbsChain<T> {
    y: Vec<T>,
    h: Vec<T>,
    rng: ChainRng,
}

impl<T: Real> GibbsChain<T> {
    /// Initializes `y`; `h` holds `+1` until the first step.
    pub fn new(p: &CondParams<T>, kind: VisibleKind, mode: InitMode, mut rng: ChainRng) -> Self {
        let y = init_chain(p, kind, mode, &mut rng);
        Self {
            y,
            h: vec![T::one(); p.n_h()],
            rng,
        }
    }

    /// One sweep: `h ← h | y`, then `y ← y | h`.
    pub fn step(&mut self, p: &CondParams<T>, kind: VisibleKind) {
        self.h = sample_hidden(p, &self.y, &mut self.rng);
        self.y = sample_visible(p, &self.h, kind, &mut self.rng);
    }

    /// A sweep whose visible update returns the conditional mean.
    pub fn step_mean(&mut self, p: &CondParams<T>, kind: VisibleKind) {
        self.h = sample_hidden(p, &self.y, &mut self.rng);
        self.y = visible_mean(p, &self.h, kind);
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn h(&self) -> &[T] {
        &self.h
    }

    pub fn rng(&self) -> &ChainRng {
        &self.rng
    }

    pub fn into_visible(self) -> Vec<T> {
        self.y
    }
}

/// `k_steps` sweeps from [`init_chain`]; returns the final visible state.
pub fn run_chain<T: Real, R: Rng + ?Sized>(
    p: &CondParams<T>,
    opts: &SampleOptions,
    kind: VisibleKind,
    rng: &mut R,
) -> Vec<T> {
    let mut y = init_chain(p, kind, opts.init_mode, rng);
    for step in 0..opts.k_steps {
        let h = sample_hidden(p, &y, rng);
        y = if opts.final_mean && step + 1 == opts.k_steps {
            visible_mean(p, &h, kind)
        } else {
            sample_visible(p, &h, kind, rng)
        };
    }
    y
}

/// One chain per conditional parameter set, run in parallel; chain `r` uses
/// stream `stream_offset + r` of `seed`. Returns an `(n, n_y)` matrix.
pub fn sample_batch<T: Real>(
    params: &[CondParams<T>],
    opts: &SampleOptions,
    kind: VisibleKind,
    seed: u64,
    stream_offset: u64,
) -> Result<Tensor<T>> {
    opts.validate()?;
    let Some(first) = params.first() else {
        return Err(Error::Shape("no conditional parameters to sample".into()));
    };
    let n_y = first.n_y();
    let rows: Vec<Vec<T>> = params
        .par_iter()
        .enumerate()
        .map(|(r, p)| {
            let mut rng = ChainRng::new(seed, stream_offset + r as u64);
            run_chain(p, opts, kind, &mut rng)
        })
        .collect();
    Tensor::matrix(rows.len(), n_y, rows.concat())
}
