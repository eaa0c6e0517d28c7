//! Reference computations for small models, all in `f64`.
//!
//! Nothing here is used by training. Each routine evaluates its quantity the
//! slow, direct way (enumeration, dense tables, central differences) so the
//! fast paths can be checked against it.

use rand::Rng;

use crate::diffnet::Sign;
use crate::error::{Error, Result};
use crate::model::{CondParams, ModelGrads, NbmModel, VisibleKind};
use crate::sampler::{hidden_up_probabilities, ising_visible_up_probabilities};
use crate::tensor::Tensor;

pub const MAX_BRUTE_HIDDEN: usize = 12;
pub const MAX_ENUM_VISIBLE: usize = 14;
pub const MAX_JOINT_UNITS: usize = 20;

/// The `index`-th configuration of `n` spins: bit `k` set means `s_k = +1`.
pub fn spin_config(index: usize, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| if index >> k & 1 == 1 { 1.0 } else { -1.0 })
        .collect()
}

/// Index of a spin configuration, inverse of [`spin_config`].
pub fn spin_index(s: &[f64]) -> usize {
    s.iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .fold(0, |acc, (k, _)| acc | 1 << k)
}

/// `½ Σ_i p_i d_i² - Σ_ij d_i W_ij h_j`, written out term by term.
pub fn direct_energy(p: &CondParams<f64>, y: &[f64], h: &[f64]) -> f64 {
    let mut e = 0.0;
    for i in 0..p.n_y() {
        let d = y[i] - p.mu()[i];
        e += 0.5 * p.prec()[i] * d * d;
        for (j, hj) in h.iter().enumerate() {
            e -= d * p.w_at(i, j) * hj;
        }
    }
    e
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// `-log` of the mean of `exp(-U(y, h))` over all `2^{n_h}` hidden states.
pub fn brute_free_energy(p: &CondParams<f64>, y: &[f64]) -> Result<f64> {
    let n_h = p.n_h();
    if n_h > MAX_BRUTE_HIDDEN {
        return Err(Error::Capacity(format!(
            "hidden enumeration limited to {MAX_BRUTE_HIDDEN} units, got {n_h}"
        )));
    }
    let neg: Vec<f64> = (0..1usize << n_h)
        .map(|k| -direct_energy(p, y, &spin_config(k, n_h)))
        .collect();
    Ok(-log_mean_exp(&neg))
}

/// A distribution over enumerated spin states.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTable {
    /// Units per state.
    pub width: usize,
    /// `probs[k]` is the probability of `spin_config(k, width)`.
    pub probs: Vec<f64>,
}

impl ProbTable {
    fn from_log_weights(width: usize, logw: Vec<f64>) -> Self {
        let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        Self {
            width,
            probs: w.into_iter().map(|v| v / z).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, state: &[f64]) -> f64 {
        self.probs[spin_index(state)]
    }

    /// `½ Σ |p - q|`.
    pub fn tv_distance(&self, other: &[f64]) -> f64 {
        0.5 * self.probs.iter().zip(other).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Empirical distribution of sampled states.
    pub fn empirical<'a>(width: usize, samples: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut counts = vec![0.0; 1 << width];
        let mut n = 0.0;
        for s in samples {
            counts[spin_index(s)] += 1.0;
            n += 1.0;
        }
        Self {
            width,
            probs: counts.into_iter().map(|c| c / n).collect(),
        }
    }
}

/// Exact `p(y | x)` over all `2^{n_y}` Ising visible states.
pub fn exact_distribution_ising(p: &CondParams<f64>) -> Result<ProbTable> {
    let n_y = p.n_y();
    if n_y > MAX_ENUM_VISIBLE {
        return Err(Error::Capacity(format!(
            "visible enumeration limited to {MAX_ENUM_VISIBLE} units, got {n_y}"
        )));
    }
    let logw = (0..1usize << n_y)
        .map(|k| brute_free_energy(p, &spin_config(k, n_y)).map(|f| -f))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbTable::from_log_weights(n_y, logw))
}

/// Exact `p(y, h | x)` for Ising visibles; states are `y` then `h`.
pub fn exact_joint_ising(p: &CondParams<f64>) -> Result<ProbTable> {
    let (n_y, n_h) = (p.n_y(), p.n_h());
    if n_y + n_h > MAX_JOINT_UNITS {
        return Err(Error::Capacity(format!(
            "joint enumeration limited to {MAX_JOINT_UNITS} units, got {}",
            n_y + n_h
        )));
    }
    let logw = (0..1usize << (n_y + n_h))
        .map(|k| {
            let s = spin_config(k, n_y + n_h);
            -direct_energy(p, &s[..n_y], &s[n_y..])
        })
        .collect();
    Ok(ProbTable::from_log_weights(n_y + n_h, logw))
}

fn spin_kernel(up: &[f64], state: &[f64]) -> f64 {
    up.iter()
        .zip(state)
        .map(|(q, &s)| if s > 0.0 { *q } else { 1.0 - q })
        .product()
}

/// Applies one sweep (`h | y`, then `y | h`) of the sampler's conditionals
/// to a joint table over `(y, h)`.
pub fn gibbs_sweep_table(p: &CondParams<f64>, joint: &ProbTable) -> Vec<f64> {
    let (n_y, n_h) = (p.n_y(), p.n_h());
    let ys: Vec<Vec<f64>> = (0..1usize << n_y).map(|k| spin_config(k, n_y)).collect();
    let hs: Vec<Vec<f64>> = (0..1usize << n_h).map(|k| spin_config(k, n_h)).collect();
    let at = |y: usize, h: usize| y | h << n_y;

    let y_marg: Vec<f64> = (0..ys.len())
        .map(|y| (0..hs.len()).map(|h| joint.probs[at(y, h)]).sum())
        .collect();
    // after the hidden update, marginal over h
    let mut h_marg = vec![0.0; hs.len()];
    for (y, yv) in ys.iter().enumerate() {
        let q = hidden_up_probabilities(p, yv);
        for (h, hv) in hs.iter().enumerate() {
            h_marg[h] += y_marg[y] * spin_kernel(&q, hv);
        }
    }
    let mut out = vec![0.0; joint.len()];
    for (h, hv) in hs.iter().enumerate() {
        let q = ising_visible_up_probabilities(p, hv);
        for (y, yv) in ys.iter().enumerate() {
            out[at(y, h)] = h_marg[h] * spin_kernel(&q, yv);
        }
    }
    out
}

fn require_ising(model: &NbmModel<f64>) -> Result<()> {
    if model.spec().visible_kind != VisibleKind::Ising {
        return Err(Error::Config("exact likelihood requires ising visibles".into()));
    }
    Ok(())
}

/// Mean exact negative log-likelihood `-log p(y_r | x_r)` of an Ising model.
pub fn exact_nll(model: &NbmModel<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    require_ising(model)?;
    let params = model.condition_params(x)?;
    let mut total = 0.0;
    for (r, p) in params.iter().enumerate() {
        let table = exact_distribution_ising(p)?;
        total -= table.prob(y.row(r)).ln();
    }
    Ok(total / params.len() as f64)
}

/// Gradient of [`exact_nll`]: data term minus the exact model expectation.
pub fn exact_nll_grad(model: &NbmModel<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<ModelGrads<f64>> {
    require_ising(model)?;
    let mut grads = ModelGrads::zeros(model);
    model.free_energy_backward(x, y, Sign::Positive, &mut grads)?;
    let params = model.condition_params(x)?;
    let n = params.len() as f64;
    let n_y = model.spec().n_y;
    for (r, p) in params.iter().enumerate() {
        let table = exact_distribution_ising(p)?;
        let states: Vec<f64> = (0..table.len()).flat_map(|k| spin_config(k, n_y)).collect();
        let xs = Tensor::from_rows(&vec![x.row(r); table.len()])?;
        let ys = Tensor::matrix(table.len(), n_y, states)?;
        let weights: Vec<f64> = table.probs.iter().map(|q| q / n).collect();
        model.free_energy_backward_weighted(&xs, &ys, &weights, &mut grads, Sign::Negative)?;
    }
    Ok(grads)
}

/// Central differences of `f` at `params`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], step: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let plus = f(&p);
            p[i] = orig - step;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

/// Elementwise `|g - fd| / max(|g|, 1e-8)`, maximized.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1e-8))
        .enumerate()
        .fold((0.0, 0), |best, (i, e)| if e > best.0 { (e, i) } else { best })
}

pub fn fd_check(f: impl FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64], step: f64) -> FdReport {
    let numeric = fd_gradient(f, params, step);
    let (max_rel_err, worst_index) = rel_err(analytic, &numeric);
    FdReport {
        max_rel_err,
        worst_index,
        numeric,
    }
}

/// Eigenvalues of a symmetric `n × n` row-major matrix by cyclic Jacobi
/// rotations, ascending.
pub fn jacobi_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n, "matrix is not {n}x{n}");
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// The joint Gaussian precision `[[P, -W], [-W', I]]` in row-major form.
pub fn joint_precision(p: &CondParams<f64>) -> Vec<f64> {
    let (n_y, n_h) = (p.n_y(), p.n_h());
    let n = n_y + n_h;
    let mut m = vec![0.0; n * n];
    for i in 0..n_y {
        m[i * n + i] = p.prec()[i];
        for j in 0..n_h {
            m[i * n + n_y + j] = -p.w_at(i, j);
            m[(n_y + j) * n + i] = -p.w_at(i, j);
        }
    }
    for j in 0..n_h {
        m[(n_y + j) * n + n_y + j] = 1.0;
    }
    m
}

/// `diag(prec) - W W'` in row-major form.
pub fn visible_schur_complement(p: &CondParams<f64>) -> Vec<f64> {
    let n = p.n_y();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let ww: f64 = (0..p.n_h()).map(|j| p.w_at(i, j) * p.w_at(k, j)).sum();
            m[i * n + k] = if i == k { p.prec()[i] - ww } else { -ww };
        }
    }
    m
}

/// Random conditional parameters: `μ ~ U(-1, 1)`, `log prec ~ U(-1, 1)`,
/// `W ~ U(-w_max, w_max)`.
pub fn random_cond_params<R: Rng + ?Sized>(n_y: usize, n_h: usize, w_max: f64, rng: &mut R) -> CondParams<f64> {
    let mu: Vec<f64> = (0..n_y).map(|_| rng.random_range(-1.0..1.0)).collect();
    let prec: Vec<f64> = (0..n_y).map(|_| rng.random_range(-1.0f64..1.0).exp()).collect();
    let w: Vec<f64> = (0..n_y * n_h).map(|_| rng.random_range(-w_max..w_max)).collect();
    CondParams::from_f64(&mu, &prec, &w, n_h).expect("valid random parameters")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::free_energy;
    use crate::rng::ChainRng;

    #[test]
    fn spin_indexing_round_trips() {
        for k in 0..16 {
            assert_eq!(spin_index(&spin_config(k, 4)), k);
        }
        assert_eq!(spin_config(0, 3), vec![-1.0; 3]);
    }

    #[test]
    fn brute_matches_closed_form() {
        let mut rng = ChainRng::new(3, 0);
        for _ in 0..20 {
            let p = random_cond_params(3, 4, 1.5, &mut rng);
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b = brute_free_energy(&p, &y).unwrap();
            assert!((b - free_energy(&p, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn capacity_limits() {
        let p = CondParams::from_f64(&[0.0], &[1.0], &[0.0; 13], 13).unwrap();
        assert!(matches!(brute_free_energy(&p, &[0.0]), Err(Error::Capacity(_))));
    }

    #[test]
    fn joint_table_marginalizes_to_visible_table() {
        let mut rng = ChainRng::new(8, 0);
        let p = random_cond_params(3, 2, 1.0, &mut rng);
        let joint = exact_joint_ising(&p).unwrap();
        let marg = exact_distribution_ising(&p).unwrap();
        for y in 0..8 {
            let s: f64 = (0..4).map(|h| joint.probs[y | h << 3]).sum();
            assert!((s - marg.probs[y]).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_known_spectrum() {
        let ev = jacobi_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
        let ev = jacobi_eigenvalues(&[4.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 2.0], 3);
        assert_eq!(ev, vec![-1.0, 2.0, 4.0]);
    }

    #[test]
    fn fd_of_quadratic() {
        let r = fd_check(|p| p[0] * p[0] + 3.0 * p[1], &[2.0, 1.0], &[4.0, 3.0], 1e-5);
        assert!(r.max_rel_err < 1e-8);
        let r = fd_check(|p| p[0] * p[0], &[2.0], &[5.0], 1e-5);
        assert!((r.max_rel_err - 0.2).abs() < 1e-6);
    }
}
