//! Neural Boltzmann machine assembly and energy mathematics.
//!
//! Three networks map the conditioning input `x` to the parameters of a
//! Gaussian (or Ising) visible / Ising hidden RBM:
//!
//! - `mu_net`   (θ): visible bias `μ(x)`, optionally squashed through `tanh`;
//! - `logp_net` (φ): log of the diagonal precision, `prec = exp(logp_net(x))`;
//! - `w_net`    (ψ): coupling weights, reshaped to `n_y × n_h` and divided
//!   by `sqrt(n_y)`.
//!
//! With `d = y - μ`, the joint energy is `½ d'Pd - d'Wh` and the free energy
//! after summing out `h ∈ {±1}^{n_h}` is `½ d'Pd - Σ_j log cosh([W'd]_j)`,
//! which is `-log` of the *average* of `exp(-U)` over the `2^{n_h}` hidden
//! configurations. The `n_h log 2` offset from the plain sum cancels in every
//! normalized quantity.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::diffnet::{Activation, GradAccum, Mlp, MlpSpec, Sign, Tape};
use crate::error::{shape_err, Error, Network, Result};
use crate::scalar::{dot, Real};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VisibleKind {
    Gaussian,
    Ising,
}

impl VisibleKind {
    pub fn name(self) -> &'static str {
        match self {
            VisibleKind::Gaussian => "gaussian",
            VisibleKind::Ising => "ising",
        }
    }
}

impl fmt::Display for VisibleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VisibleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(VisibleKind::Gaussian),
            "ising" => Ok(VisibleKind::Ising),
            other => Err(Error::Config(format!(
                "unknown visible kind `{other}` (gaussian | ising)"
            ))),
        }
    }
}

/// Structure of an NBM.
#[derive(Debug, Clone, PartialEq)]
pub struct NbmSpec {
    pub n_x: usize,
    pub n_y: usize,
    pub n_h: usize,
    pub visible_kind: VisibleKind,
    pub mu_spec: MlpSpec,
    pub logp_spec: MlpSpec,
    pub w_spec: MlpSpec,
    /// Squash the bias network output through `tanh`. Required for Ising
    /// visibles, where bias and precision only enter through `prec * μ`.
    pub tanh_bias: bool,
    /// Divide the weight network output by `sqrt(n_y)`. Disabling it is an
    /// ablation switch.
    pub scale_weights: bool,
}

impl NbmSpec {
    /// Bias and log-precision networks with one relu hidden layer of width
    /// `hidden_width`; the weight network is a single affine map
    /// `x -> n_y * n_h`.
    pub fn standard(
        n_x: usize,
        n_y: usize,
        n_h: usize,
        visible_kind: VisibleKind,
        hidden_width: usize,
    ) -> Self {
        let two_layer = |out| {
            MlpSpec::new(
                n_x,
                [(hidden_width, Activation::Relu), (out, Activation::Identity)],
            )
        };
        Self {
            n_x,
            n_y,
            n_h,
            visible_kind,
            mu_spec: two_layer(n_y),
            logp_spec: two_layer(n_y),
            w_spec: MlpSpec::new(n_x, [(n_y * n_h, Activation::Identity)]),
            tanh_bias: visible_kind == VisibleKind::Ising,
            scale_weights: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 || self.n_h == 0 {
            return Err(Error::Config(format!(
                "n_x, n_y, n_h must be positive (got {}, {}, {})",
                self.n_x, self.n_y, self.n_h
            )));
        }
        for (net, spec, out) in [
            (Network::Mean, &self.mu_spec, self.n_y),
            (Network::LogPrecision, &self.logp_spec, self.n_y),
            (Network::Weights, &self.w_spec, self.n_y * self.n_h),
        ] {
            spec.validate()?;
            if spec.in_dim != self.n_x || spec.out_dim() != out {
                return Err(Error::Config(format!(
                    "{net} is {spec}, expected input {} and output {out}",
                    self.n_x
                )));
            }
        }
        if self.visible_kind == VisibleKind::Ising && !self.tanh_bias {
            return Err(Error::Config(
                "ising visibles require the tanh bias head".into(),
            ));
        }
        Ok(())
    }

    pub fn weight_scale(&self) -> f64 {
        if self.scale_weights {
            1.0 / (self.n_y as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn net_spec(&self, net: Network) -> &MlpSpec {
        match net {
            Network::Mean => &self.mu_spec,
            Network::LogPrecision => &self.logp_spec,
            Network::Weights => &self.w_spec,
        }
    }
}

/// RBM parameters instantiated for one conditioning input.
#[derive(Debug, Clone, PartialEq)]
pub struct CondParams<T> {
    mu: Vec<T>,
    prec: Vec<T>,
    /// Row-major `n_y × n_h`, already scaled.
    w: Vec<T>,
    n_h: usize,
}

impl<T: Real> CondParams<T> {
    pub fn new(mu: Vec<T>, prec: Vec<T>, w: Vec<T>, n_h: usize) -> Result<Self> {
        let n_y = mu.len();
        if prec.len() != n_y || w.len() != n_y * n_h || n_h == 0 || n_y == 0 {
            return Err(shape_err!(
                "conditional parameters: mu {}, prec {}, w {} for n_h {n_h}",
                mu.len(),
                prec.len(),
                w.len()
            ));
        }
        if let Some(p) = prec.iter().find(|p| !(**p > T::zero()) || !p.is_finite()) {
            return Err(Error::NonFinite(format!(
                "precision entries must be positive and finite, found {p}"
            )));
        }
        Ok(Self { mu, prec, w, n_h })
    }

    pub fn from_f64(mu: &[f64], prec: &[f64], w: &[f64], n_h: usize) -> Result<Self> {
        let cv = |v: &[f64]| v.iter().map(|&a| T::lit(a)).collect();
        Self::new(cv(mu), cv(prec), cv(w), n_h)
    }

    pub fn n_y(&self) -> usize {
        self.mu.len()
    }

    pub fn n_h(&self) -> usize {
        self.n_h
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn prec(&self) -> &[T] {
        &self.prec
    }

    pub fn w(&self) -> &[T] {
        &self.w
    }

    #[inline]
    pub fn w_at(&self, i: usize, j: usize) -> T {
        self.w[i * self.n_h + j]
    }

    /// Field on the hidden units, `W'(y - μ)`.
    pub fn hidden_field(&self, y: &[T]) -> Vec<T> {
        assert_eq!(y.len(), self.n_y(), "visible vector length");
        let mut a = vec![T::zero(); self.n_h];
        for (i, (&yi, &mi)) in y.iter().zip(&self.mu).enumerate() {
            let d = yi - mi;
            let row = &self.w[i * self.n_h..(i + 1) * self.n_h];
            for (aj, &wij) in a.iter_mut().zip(row) {
                *aj = *aj + wij * d;
            }
        }
        a
    }

    /// `W h`.
    pub fn coupling(&self, h: &[T]) -> Vec<T> {
        assert_eq!(h.len(), self.n_h, "hidden vector length");
        self.w
            .chunks_exact(self.n_h)
            .map(|row| dot(row, h))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> CondParams<U> {
        let cv = |v: &[T]| v.iter().map(|a| U::lit(a.as_f64())).collect();
        CondParams {
            mu: cv(&self.mu),
            prec: cv(&self.prec),
            w: cv(&self.w),
            n_h: self.n_h,
        }
    }
}

/// `log cosh(a)` evaluated as `|a| + log(1 + e^{-2|a|}) - log 2`, finite for
/// any finite `a`.
#[inline]
pub fn log_cosh<T: Real>(a: T) -> T {
    let m = a.abs();
    m + (-(m + m)).exp().ln_1p() - T::lit(std::f64::consts::LN_2)
}

/// `U(y, h) = ½ (y-μ)' P (y-μ) - (y-μ)' W h`.
///
/// Panics if the vector lengths do not match `p`.
pub fn energy<T: Real>(p: &CondParams<T>, y: &[T], h: &[T]) -> T {
    assert_eq!(y.len(), p.n_y(), "visible vector length");
    assert_eq!(h.len(), p.n_h(), "hidden vector length");
    let wh = p.coupling(h);
    let mut quad = T::zero();
    let mut cross = T::zero();
    for i in 0..p.n_y() {
        let d = y[i] - p.mu[i];
        quad = quad + p.prec[i] * d * d;
        cross = cross + d * wh[i];
    }
    T::lit(0.5) * quad - cross
}

/// `𝒰(y) = ½ (y-μ)' P (y-μ) - Σ_j log cosh([W'(y-μ)]_j)`.
///
/// This equals `-log Σ_h exp(-U(y, h)) + n_h log 2`.
///
/// Panics if `y.len() != p.n_y()`.
pub fn free_energy<T: Real>(p: &CondParams<T>, y: &[T]) -> T {
    let quad = y
        .iter()
        .zip(&p.mu)
        .zip(&p.prec)
        .fold(T::zero(), |s, ((&yi, &mi), &pi)| s + pi * (yi - mi) * (yi - mi));
    let lc = p
        .hidden_field(y)
        .into_iter()
        .fold(T::zero(), |s, a| s + log_cosh(a));
    T::lit(0.5) * quad - lc
}

/// `∂𝒰/∂y = P(y-μ) - W tanh(W'(y-μ))`.
pub fn free_energy_grad_y<T: Real>(p: &CondParams<T>, y: &[T]) -> Vec<T> {
    let t: Vec<T> = p.hidden_field(y).into_iter().map(T::tanh).collect();
    let wt = p.coupling(&t);
    (0..p.n_y())
        .map(|i| p.prec[i] * (y[i] - p.mu[i]) - wt[i])
        .collect()
}

/// Whether `y = μ` is a local minimum of the energy, i.e. whether
/// `diag(prec) - W W'` is positive definite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdReport {
    pub min_eigenvalue: f64,
    pub is_pd: bool,
}

/// Dense check of `diag(prec) - W W'`: Cholesky for the verdict, a symmetric
/// eigensolve for the smallest eigenvalue. Cubic in `n_y`; meant for
/// `n_y <= 2048`.
pub fn pd_diagnostic<T: Real>(p: &CondParams<T>) -> PdReport {
    let n = p.n_y();
    let mut m = vec![0.0f64; n * n];
    for i in 0..n {
        for k in 0..=i {
            let mut s = 0.0;
            for j in 0..p.n_h {
                s += p.w_at(i, j).as_f64() * p.w_at(k, j).as_f64();
            }
            let v = if i == k { p.prec[i].as_f64() - s } else { -s };
            m[i * n + k] = v;
            m[k * n + i] = v;
        }
    }
    let min_eigenvalue = DMatrix::from_row_slice(n, n, &m)
        .symmetric_eigenvalues()
        .min();
    PdReport {
        min_eigenvalue,
        is_pd: cholesky_in_place(&mut m, n),
    }
}

/// Same verdict as [`pd_diagnostic`] through the `n_h × n_h` matrix
/// `I - W' P⁻¹ W`, which is positive definite exactly when
/// `diag(prec) - W W'` is. Cheap enough to run on every training row.
pub fn pd_verdict_lowrank<T: Real>(p: &CondParams<T>) -> bool {
    let (n_y, n_h) = (p.n_y(), p.n_h);
    // columns of U = P^{-1/2} W, contiguous
    let mut u = vec![0.0f64; n_h * n_y];
    let mut frob = 0.0;
    for i in 0..n_y {
        let s = 1.0 / p.prec[i].as_f64().sqrt();
        for j in 0..n_h {
            let v = p.w[i * n_h + j].as_f64() * s;
            u[j * n_y + i] = v;
            frob += v * v;
        }
    }
    if !frob.is_finite() {
        return false;
    }
    // ‖U‖₂ ≤ ‖U‖_F, so this already settles it
    if frob < 1.0 {
        return true;
    }
    let mut k = vec![0.0f64; n_h * n_h];
    for a in 0..n_h {
        let ua = &u[a * n_y..(a + 1) * n_y];
        for b in 0..=a {
            let ub = &u[b * n_y..(b + 1) * n_y];
            let g = dot(ua, ub);
            let v = if a == b { 1.0 - g } else { -g };
            k[a * n_h + b] = v;
            k[b * n_h + a] = v;
        }
    }
    cholesky_in_place(&mut k, n_h)
}

/// Lower Cholesky factorization; false as soon as a pivot is not positive.
fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// The three parameter networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NbmModel<T> {
    spec: NbmSpec,
    mu_net: Mlp<T>,
    logp_net: Mlp<T>,
    w_net: Mlp<T>,
}

/// One gradient accumulator per network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub mu: GradAccum<T>,
    pub logp: GradAccum<T>,
    pub w: GradAccum<T>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros(model: &NbmModel<T>) -> Self {
        Self {
            mu: GradAccum::zeros_like(&model.mu_net),
            logp: GradAccum::zeros_like(&model.logp_net),
            w: GradAccum::zeros_like(&model.w_net),
        }
    }

    pub fn get(&self, net: Network) -> &GradAccum<T> {
        match net {
            Network::Mean => &self.mu,
            Network::LogPrecision => &self.logp,
            Network::Weights => &self.w,
        }
    }

    pub fn get_mut(&mut self, net: Network) -> &mut GradAccum<T> {
        match net {
            Network::Mean => &mut self.mu,
            Network::LogPrecision => &mut self.logp,
            Network::Weights => &mut self.w,
        }
    }

    pub fn merge(&mut self, other: &ModelGrads<T>) -> Result<()> {
        self.mu.merge(&other.mu)?;
        self.logp.merge(&other.logp)?;
        self.w.merge(&other.w)
    }

    pub fn scale(&mut self, factor: T) {
        self.mu.scale(factor);
        self.logp.scale(factor);
        self.w.scale(factor);
    }

    /// `mu`, then `logp`, then `w`, matching [`NbmModel::flatten`].
    pub fn flatten(&self) -> Vec<T> {
        let mut v = self.mu.flatten();
        v.extend(self.logp.flatten());
        v.extend(self.w.flatten());
        v
    }

    pub fn max_abs(&self) -> f64 {
        self.mu.max_abs().max(self.logp.max_abs()).max(self.w.max_abs())
    }

    /// Names the first network whose gradient is not finite.
    pub fn check_finite(&self) -> Result<()> {
        for net in Network::ALL {
            if !self.get(net).is_finite() {
                return Err(Error::Numeric {
                    network: net,
                    detail: "non-finite parameter gradient".into(),
                });
            }
        }
        Ok(())
    }
}

/// Conditional parameters of a batch plus the tapes needed to backpropagate
/// into the networks.
#[derive(Debug, Clone)]
pub struct Conditioned<T> {
    pub params: Vec<CondParams<T>>,
    mu_tape: Tape<T>,
    logp_tape: Tape<T>,
    w_tape: Tape<T>,
}

/// Upstream gradients with respect to the conditional parameters of each row:
/// `d_mu` and `d_prec` are `(n, n_y)`, `d_w` is `(n, n_y * n_h)`, all taken
/// with respect to the post-head values stored in [`CondParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub d_mu: Tensor<T>,
    pub d_prec: Tensor<T>,
    pub d_w: Tensor<T>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros(n: usize, n_y: usize, n_h: usize) -> Self {
        Self {
            d_mu: Tensor::zeros(&[n, n_y]),
            d_prec: Tensor::zeros(&[n, n_y]),
            d_w: Tensor::zeros(&[n, n_y * n_h]),
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &ParamGrads<T>, factor: T) -> Result<()> {
        for (a, b) in [
            (&mut self.d_mu, &other.d_mu),
            (&mut self.d_prec, &other.d_prec),
            (&mut self.d_w, &other.d_w),
        ] {
            if a.shape() != b.shape() {
                return Err(shape_err!("parameter gradients {:?} vs {:?}", a.shape(), b.shape()));
            }
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + factor * y;
            }
        }
        Ok(())
    }
}

impl<T: Real> NbmModel<T> {
    /// Fresh networks; each gets its own seed derived from `seed`.
    pub fn init(spec: NbmSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let sub = |k: u64| crate::rng::mix_seed(seed, k);
        Ok(Self {
            mu_net: Mlp::init(spec.mu_spec.clone(), sub(1))?,
            logp_net: Mlp::init(spec.logp_spec.clone(), sub(2))?,
            w_net: Mlp::init(spec.w_spec.clone(), sub(3))?,
            spec,
        })
    }

    pub fn from_parts(spec: NbmSpec, mu_net: Mlp<T>, logp_net: Mlp<T>, w_net: Mlp<T>) -> Result<Self> {
        spec.validate()?;
        for (net, mlp) in [
            (Network::Mean, &mu_net),
            (Network::LogPrecision, &logp_net),
            (Network::Weights, &w_net),
        ] {
            if mlp.spec() != spec.net_spec(net) {
                return Err(shape_err!(
                    "{net} has structure {}, spec says {}",
                    mlp.spec(),
                    spec.net_spec(net)
                ));
            }
        }
        Ok(Self {
            spec,
            mu_net,
            logp_net,
            w_net,
        })
    }

    pub fn spec(&self) -> &NbmSpec {
        &self.spec
    }

    pub fn net(&self, net: Network) -> &Mlp<T> {
        match net {
            Network::Mean => &self.mu_net,
            Network::LogPrecision => &self.logp_net,
            Network::Weights => &self.w_net,
        }
    }

    pub fn net_mut(&mut self, net: Network) -> &mut Mlp<T> {
        match net {
            Network::Mean => &mut self.mu_net,
            Network::LogPrecision => &mut self.logp_net,
            Network::Weights => &mut self.w_net,
        }
    }

    pub fn num_params(&self) -> usize {
        Network::ALL.iter().map(|&n| self.net(n).num_params()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        Network::ALL
            .iter()
            .flat_map(|&n| self.net(n).flatten())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(shape_err!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            ));
        }
        let mut offset = 0;
        for net in Network::ALL {
            let n = self.net(net).num_params();
            self.net_mut(net).set_flat(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        Network::ALL.iter().all(|&n| self.net(n).is_finite())
    }

    pub fn cast<U: Real>(&self) -> NbmModel<U> {
        NbmModel {
            spec: self.spec.clone(),
            mu_net: self.mu_net.cast(),
            logp_net: self.logp_net.cast(),
            w_net: self.w_net.cast(),
        }
    }

    fn assemble(&self, mu_raw: &Tensor<T>, logp: &Tensor<T>, w_raw: &Tensor<T>) -> Result<Vec<CondParams<T>>> {
        for (net, out) in [
            (Network::Mean, mu_raw),
            (Network::LogPrecision, logp),
            (Network::Weights, w_raw),
        ] {
            if !out.is_finite() {
                return Err(Error::Numeric {
                    network: net,
                    detail: "non-finite network output".into(),
                });
            }
        }
        let scale = T::lit(self.spec.weight_scale());
        let n_h = self.spec.n_h;
        (0..mu_raw.rows())
            .map(|r| {
                let mu = if self.spec.tanh_bias {
                    mu_raw.row(r).iter().map(|v| v.tanh()).collect()
                } else {
                    mu_raw.row(r).to_vec()
                };
                let prec: Vec<T> = logp.row(r).iter().map(|v| v.exp()).collect();
                if prec.iter().any(|p| !p.is_finite() || *p <= T::zero()) {
                    return Err(Error::Numeric {
                        network: Network::LogPrecision,
                        detail: "log-precision outside the representable range".into(),
                    });
                }
                let w = w_raw.row(r).iter().map(|&v| v * scale).collect();
                Ok(CondParams { mu, prec, w, n_h })
            })
            .collect()
    }

    /// Conditional parameters for each row of `x`, with tapes for backward.
    pub fn condition(&self, x: &Tensor<T>) -> Result<Conditioned<T>> {
        x.expect_cols(self.spec.n_x, "conditioning input")?;
        let (mu_raw, mu_tape) = self.mu_net.forward(x)?;
        let (logp, logp_tape) = self.logp_net.forward(x)?;
        let (w_raw, w_tape) = self.w_net.forward(x)?;
        Ok(Conditioned {
            params: self.assemble(&mu_raw, &logp, &w_raw)?,
            mu_tape,
            logp_tape,
            w_tape,
        })
    }

    /// Conditional parameters only, for sampling and inspection.
    pub fn condition_params(&self, x: &Tensor<T>) -> Result<Vec<CondParams<T>>> {
        x.expect_cols(self.spec.n_x, "conditioning input")?;
        self.assemble(
            &self.mu_net.predict(x)?,
            &self.logp_net.predict(x)?,
            &self.w_net.predict(x)?,
        )
    }

    /// Chains gradients with respect to `(μ, prec, W)` through the output
    /// heads (tanh, exp, weight scale) and the three networks.
    pub fn backward_params(
        &self,
        cond: &Conditioned<T>,
        upstream: ParamGrads<T>,
        grads: &mut ModelGrads<T>,
        sign: Sign,
    ) -> Result<()> {
        let ParamGrads {
            mut d_mu,
            mut d_prec,
            mut d_w,
        } = upstream;
        let n = cond.params.len();
        let (n_y, n_h) = (self.spec.n_y, self.spec.n_h);
        if d_mu.shape() != [n, n_y] || d_prec.shape() != [n, n_y] || d_w.shape() != [n, n_y * n_h] {
            return Err(shape_err!("parameter gradients do not match a batch of {n}"));
        }
        for (r, p) in cond.params.iter().enumerate() {
            if self.spec.tanh_bias {
                for (g, &m) in d_mu.row_mut(r).iter_mut().zip(&p.mu) {
                    *g = *g * (T::one() - m * m);
                }
            }
            // d prec / d logp = prec
            for (g, &pi) in d_prec.row_mut(r).iter_mut().zip(&p.prec) {
                *g = *g * pi;
            }
        }
        let scale = T::lit(self.spec.weight_scale());
        if self.spec.scale_weights {
            for g in d_w.data_mut() {
                *g = *g * scale;
            }
        }
        self.mu_net.accumulate(&cond.mu_tape, &d_mu, &mut grads.mu, sign)?;
        self.logp_net
            .accumulate(&cond.logp_tape, &d_prec, &mut grads.logp, sign)?;
        self.w_net.accumulate(&cond.w_tape, &d_w, &mut grads.w, sign)?;
        grads.check_finite()
    }

    /// Accumulates `sign * Σ_r weights[r] ∂𝒰(y_r | x_r)/∂params` and returns
    /// `Σ_r weights[r] 𝒰(y_r | x_r)`.
    pub fn free_energy_backward_weighted(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        weights: &[T],
        grads: &mut ModelGrads<T>,
        sign: Sign,
    ) -> Result<T> {
        y.expect_cols(self.spec.n_y, "visible batch")?;
        if x.rows() != y.rows() || weights.len() != y.rows() {
            return Err(shape_err!(
                "batch rows: x {}, y {}, weights {}",
                x.rows(),
                y.rows(),
                weights.len()
            ));
        }
        let cond = self.condition(x)?;
        self.free_energy_backward_cond(&cond, y, weights, grads, sign)
    }

    /// As [`Self::free_energy_backward_weighted`], reusing a forward pass.
    pub fn free_energy_backward_cond(
        &self,
        cond: &Conditioned<T>,
        y: &Tensor<T>,
        weights: &[T],
        grads: &mut ModelGrads<T>,
        sign: Sign,
    ) -> Result<T> {
        y.expect_cols(self.spec.n_y, "visible batch")?;
        if cond.params.len() != y.rows() || weights.len() != y.rows() {
            return Err(shape_err!(
                "batch rows: conditioned {}, y {}, weights {}",
                cond.params.len(),
                y.rows(),
                weights.len()
            ));
        }
        let (upstream, total) = free_energy_upstream(&cond.params, y, weights);
        self.backward_params(cond, upstream, grads, sign)?;
        Ok(total)
    }

    /// Accumulates `sign * ∂/∂params` of the batch-mean free energy and
    /// returns that mean.
    pub fn free_energy_backward(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        sign: Sign,
        grads: &mut ModelGrads<T>,
    ) -> Result<T> {
        let n = y.rows();
        if n == 0 {
            return Err(shape_err!("empty batch"));
        }
        let weights = vec![T::one() / T::lit(n as f64); n];
        self.free_energy_backward_weighted(x, y, &weights, grads, sign)
    }

    /// Batch-mean free energy without gradients.
    pub fn mean_free_energy(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
        y.expect_cols(self.spec.n_y, "visible batch")?;
        let params = self.condition_params(x)?;
        if params.len() != y.rows() || params.is_empty() {
            return Err(shape_err!("x has {} rows, y has {}", params.len(), y.rows()));
        }
        let total = params
            .iter()
            .enumerate()
            .fold(T::zero(), |s, (r, p)| s + free_energy(p, y.row(r)));
        Ok(total / T::lit(params.len() as f64))
    }
}

/// Per-row gradients of `weights[r] * 𝒰(y_r)` with respect to `(μ, prec, W)`:
///
/// - `∂𝒰/∂μ_i    = -p_i d_i + Σ_j W_ij tanh(a_j)`
/// - `∂𝒰/∂p_i    = ½ d_i²`
/// - `∂𝒰/∂W_ij   = -d_i tanh(a_j)`
///
/// with `d = y - μ` and `a = W'd`.
pub fn free_energy_upstream<T: Real>(
    params: &[CondParams<T>],
    y: &Tensor<T>,
    weights: &[T],
) -> (ParamGrads<T>, T) {
    let n = params.len();
    let (n_y, n_h) = (params[0].n_y(), params[0].n_h());
    let mut g = ParamGrads::zeros(n, n_y, n_h);
    let half = T::lit(0.5);
    let mut total = T::zero();
    for (r, p) in params.iter().enumerate() {
        let yr = y.row(r);
        let wr = weights[r];
        total = total + wr * free_energy(p, yr);
        let t: Vec<T> = p.hidden_field(yr).into_iter().map(T::tanh).collect();
        let wt = p.coupling(&t);
        let d_mu = g.d_mu.row_mut(r);
        for i in 0..n_y {
            let d = yr[i] - p.mu[i];
            d_mu[i] = wr * (wt[i] - p.prec[i] * d);
        }
        let d_prec = g.d_prec.row_mut(r);
        for i in 0..n_y {
            let d = yr[i] - p.mu[i];
            d_prec[i] = wr * half * d * d;
        }
        let d_w = g.d_w.row_mut(r);
        for i in 0..n_y {
            let d = yr[i] - p.mu[i];
            for j in 0..n_h {
                d_w[i * n_h + j] = -(wr * d * t[j]);
            }
        }
    }
    (g, total)
}
