//! The self-check suite: analytic code paths against the oracles.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffnet::Sign;
use crate::error::Result;
use crate::model::{
    free_energy, free_energy_grad_y, log_cosh, pd_diagnostic, pd_verdict_lowrank, CondParams, ModelGrads, NbmModel, NbmSpec,
    VisibleKind,
};
use crate::oracle::{
    brute_free_energy, exact_distribution_ising, exact_joint_ising, exact_nll, exact_nll_grad, fd_check,
    gibbs_sweep_table, jacobi_eigenvalues, joint_precision, random_cond_params, visible_schur_complement, ProbTable,
};
use crate::sampler::{sample_batch, SampleOptions};
use crate::tensor::Tensor;
use crate::trainer::{penalty_term, TrainConfig};

/// Deliberate defects, for confirming that the suite catches them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Flip the sign of the log-cosh term in the analytic free energy.
    pub logcosh_sign: bool,
}

impl Faults {
    fn free_energy(&self, p: &CondParams<f64>, y: &[f64]) -> f64 {
        if !self.logcosh_sign {
            return free_energy(p, y);
        }
        let quad: f64 = (0..p.n_y())
            .map(|i| 0.5 * p.prec()[i] * (y[i] - p.mu()[i]).powi(2))
            .sum();
        quad + p.hidden_field(y).into_iter().map(log_cosh).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// The measured statistic.
    pub value: f64,
    /// The bound it was held to.
    pub bound: f64,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<28} {:>12.3e} (bound {:.1e})  {:>7.2}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.bound,
            self.seconds,
            self.detail
        )
    }
}

fn timed(name: &'static str, bound: f64, f: impl FnOnce() -> Result<(f64, String)>) -> CheckResult {
    let start = Instant::now();
    let (value, detail, ok) = match f() {
        Ok((v, d)) => (v, d, v < bound),
        Err(e) => (f64::NAN, format!("error: {e}"), false),
    };
    CheckResult {
        name,
        passed: ok,
        value,
        bound,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Worst relative gap between the analytic free energy and hidden-state
/// enumeration over `models` random models with `n_h` cycling in 1..=12.
pub fn check_marginalization(models: usize, seed: u64, faults: Faults) -> CheckResult {
    timed("marginalization", 1e-8, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for m in 0..models {
            let n_h = 1 + m % 12;
            let n_y = rng.random_range(1..=6);
            let p = random_cond_params(n_y, n_h, 1.5, &mut rng);
            let y: Vec<f64> = (0..n_y).map(|_| rng.random_range(-2.0..2.0)).collect();
            let brute = brute_free_energy(&p, &y)?;
            let analytic = faults.free_energy(&p, &y);
            worst = worst.max((analytic - brute).abs() / brute.abs().max(1e-8));
        }
        Ok((worst, format!("{models} models")))
    })
}

/// Small random model used by the gradient checks (`f64`, relu hidden layer).
pub fn gradient_test_model(kind: VisibleKind, n_x: usize, n_y: usize, n_h: usize, seed: u64) -> Result<NbmModel<f64>> {
    let mut model = NbmModel::init(NbmSpec::standard(n_x, n_y, n_h, kind, 5), seed)?;
    // push the parameters away from the zero-bias initialization
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let flat: Vec<f64> = model
        .flatten()
        .iter()
        .map(|v| v + rng.random_range(-0.3..0.3))
        .collect();
    model.set_flat(&flat)?;
    Ok(model)
}

fn random_batch(model: &NbmModel<f64>, n: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let spec = model.spec();
    let x: Vec<f64> = (0..n * spec.n_x).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n * spec.n_y)
        .map(|_| match spec.visible_kind {
            VisibleKind::Gaussian => rng.random_range(-1.5..1.5),
            VisibleKind::Ising => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        })
        .collect();
    Ok((Tensor::matrix(n, spec.n_x, x)?, Tensor::matrix(n, spec.n_y, y)?))
}

const FD_STEP: f64 = 1e-5;

/// Mean free energy and penalty gradients against central differences on
/// `n_x = 3, n_y = 4, n_h = 3` models.
pub fn check_gradients(restarts: usize, seed: u64) -> CheckResult {
    timed("network gradients", 1e-4, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TrainConfig::defaults(VisibleKind::Gaussian);
        let mut worst: f64 = 0.0;
        for r in 0..restarts {
            let mut model = gradient_test_model(VisibleKind::Gaussian, 3, 4, 3, seed.wrapping_add(r as u64))?;
            let (x, y) = random_batch(&model, 6, &mut rng)?;
            let theta = model.flatten();

            let mut g = ModelGrads::zeros(&model);
            model.free_energy_backward(&x, &y, Sign::Positive, &mut g)?;
            let fe = g.flatten();
            let cond = model.condition(&x)?;
            let mut g = ModelGrads::zeros(&model);
            penalty_term(&model, &cond, &cfg, &mut g)?;
            let pen = g.flatten();

            let mut probe = model.clone();
            let rep = fd_check(
                |t| {
                    probe.set_flat(t).expect("same length");
                    probe.mean_free_energy(&x, &y).expect("finite")
                },
                &theta,
                &fe,
                FD_STEP,
            );
            worst = worst.max(rep.max_rel_err);
            let rep = fd_check(
                |t| {
                    model.set_flat(t).expect("same length");
                    let c = model.condition(&x).expect("finite");
                    penalty_term(&model, &c, &cfg, &mut ModelGrads::zeros(&model)).expect("finite")
                },
                &theta,
                &pen,
                FD_STEP,
            );
            worst = worst.max(rep.max_rel_err);
        }
        Ok((worst, format!("{restarts} restarts, free energy + penalty")))
    })
}

/// `∂𝒰/∂y` against central differences.
pub fn check_visible_gradient(models: usize, seed: u64) -> CheckResult {
    timed("visible gradient", 1e-6, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..models {
            let p = random_cond_params(4, 3, 1.0, &mut rng);
            let y: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let rep = fd_check(|v| free_energy(&p, v), &y, &free_energy_grad_y(&p, &y), FD_STEP);
            worst = worst.max(rep.max_rel_err);
        }
        Ok((worst, format!("{models} models")))
    })
}

/// Exact Ising likelihood gradient against central differences of the
/// enumerated likelihood.
pub fn check_exact_nll_grad(seed: u64) -> CheckResult {
    timed("exact likelihood gradient", 1e-4, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = gradient_test_model(VisibleKind::Ising, 2, 3, 2, seed)?;
        let (x, y) = random_batch(&model, 3, &mut rng)?;
        let analytic = exact_nll_grad(&model, &x, &y)?.flatten();
        let theta = model.flatten();
        let rep = fd_check(
            |t| {
                model.set_flat(t).expect("same length");
                exact_nll(&model, &x, &y).expect("enumerable")
            },
            &theta,
            &analytic,
            FD_STEP,
        );
        Ok((rep.max_rel_err, format!("{} parameters", theta.len())))
    })
}

/// One exact Gibbs sweep applied to the exact joint table.
pub fn check_sweep_invariance(models: usize, seed: u64) -> CheckResult {
    timed("gibbs sweep invariance", 1e-10, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..models {
            let p = random_cond_params(4, 3, 1.0, &mut rng);
            let joint = exact_joint_ising(&p)?;
            let swept = gibbs_sweep_table(&p, &joint);
            let gap = joint
                .probs
                .iter()
                .zip(&swept)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(gap);
        }
        Ok((worst, format!("{models} models, n_y=4 n_h=3")))
    })
}

/// Empirical distribution of independent `k = 50` chains against the exact
/// visible marginal, as total variation.
pub fn check_sampler_tv(chains: usize, seed: u64) -> CheckResult {
    timed("sampler total variation", 0.02, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_cond_params(4, 3, 1.0, &mut rng);
        let exact = exact_distribution_ising(&p)?;
        let params = vec![p; chains];
        let samples = sample_batch(&params, &SampleOptions::new(50), VisibleKind::Ising, seed, 0)?;
        let empirical = ProbTable::empirical(4, samples.data().chunks(4));
        Ok((exact.tv_distance(&empirical.probs), format!("{chains} chains, k=50")))
    })
}

/// Smallest eigenvalue of `diag(prec) - WW'`: fast path vs Jacobi. Both
/// PD verdicts must agree with the sign of the joint precision spectrum.
pub fn check_pd_diagnostic(models: usize, seed: u64) -> CheckResult {
    timed("pd diagnostic", 1e-9, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut pd = 0;
        for _ in 0..models {
            let w_max = rng.random_range(0.05..0.9);
            let p = random_cond_params(5, 4, w_max, &mut rng);
            let rep = pd_diagnostic(&p);
            let schur = jacobi_eigenvalues(&visible_schur_complement(&p), 5);
            let joint = jacobi_eigenvalues(&joint_precision(&p), 9);
            let truth = joint[0] > 0.0;
            if rep.is_pd != truth || pd_verdict_lowrank(&p) != truth {
                return Ok((f64::INFINITY, format!("verdict disagrees at λ_min = {}", joint[0])));
            }
            pd += truth as usize;
            worst = worst.max((rep.min_eigenvalue - schur[0]).abs());
        }
        Ok((worst, format!("{models} models, {pd} positive definite")))
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SuiteOptions {
    /// Only the sub-second checks, at reduced sizes.
    pub fast: bool,
    pub faults: Faults,
    pub seed: u64,
}

pub fn run_suite(opts: SuiteOptions) -> Vec<CheckResult> {
    let s = opts.seed;
    if opts.fast {
        return vec![
            check_marginalization(24, s, opts.faults),
            check_gradients(2, s),
            check_visible_gradient(10, s),
            check_sweep_invariance(3, s),
            check_pd_diagnostic(20, s),
        ];
    }
    vec![
        check_marginalization(200, s, opts.faults),
        check_gradients(20, s),
        check_visible_gradient(100, s),
        check_exact_nll_grad(s),
        check_sweep_invariance(20, s),
        check_pd_diagnostic(200, s),
        check_sampler_tv(200_000, s),
    ]
}
