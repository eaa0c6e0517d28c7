//! Contrastive-divergence training with Adam.
//!
//! Each step conditions the batch once, then accumulates
//!
//! ```text
//! ∇ mean 𝒰(y_data | x)  -  ∇ mean 𝒰(ỹ | x)  +  ∇ penalty
//! ```
//!
//! where `ỹ` comes from fresh `k`-step Gibbs chains that are treated as
//! constants.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::diffnet::Sign;
use crate::error::{Error, Network, Result};
use crate::model::{
    free_energy_upstream, pd_verdict_lowrank, Conditioned, ModelGrads, NbmModel, ParamGrads, VisibleKind,
};
use crate::rng::mix_seed;
use crate::sampler::{sample_batch, InitMode, SampleOptions};
use crate::scalar::Real;
use crate::tensor::Tensor;

const CHAIN_TAG: u64 = 0xC4A1_0000;
const SHUFFLE_TAG: u64 = 0x5_4F1E;

/// What the L2 coefficients act on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PenaltyMode {
    /// Mean squares of the conditional parameters `μ`, `prec`, `W`.
    #[default]
    Outputs,
    /// Mean squares of each network's own parameters.
    WeightDecay,
}

impl PenaltyMode {
    pub fn name(self) -> &'static str {
        match self {
            PenaltyMode::Outputs => "outputs",
            PenaltyMode::WeightDecay => "weight_decay",
        }
    }
}

impl FromStr for PenaltyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outputs" => Ok(PenaltyMode::Outputs),
            "weight_decay" => Ok(PenaltyMode::WeightDecay),
            other => Err(Error::Config(format!(
                "unknown penalty mode `{other}` (outputs | weight_decay)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub k_steps: usize,
    pub l2_w: f64,
    pub l2_mu: f64,
    pub l2_prec: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub penalty_mode: PenaltyMode,
    /// Stop after this many optimizer steps in total, if set.
    pub max_steps: Option<u64>,
    pub init_mode: InitMode,
}

impl TrainConfig {
    pub fn defaults(kind: VisibleKind) -> Self {
        Self {
            learning_rate: match kind {
                VisibleKind::Gaussian => 0.0005,
                VisibleKind::Ising => 0.01,
            },
            batch_size: 128,
            epochs: 50,
            k_steps: 32,
            l2_w: 1.0,
            l2_mu: 0.5,
            l2_prec: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            penalty_mode: PenaltyMode::Outputs,
            max_steps: None,
            init_mode: InitMode::Draw,
        }
    }

    /// No penalties at all.
    pub fn without_penalty(mut self) -> Self {
        self.l2_w = 0.0;
        self.l2_mu = 0.0;
        self.l2_prec = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.k_steps == 0 {
            return bad("k_steps must be at least 1");
        }
        if [self.l2_w, self.l2_mu, self.l2_prec]
            .iter()
            .any(|c| !(*c >= 0.0 && c.is_finite()))
        {
            return bad("penalty coefficients must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be positive");
        }
        Ok(())
    }

    fn coefficient(&self, net: Network) -> f64 {
        match net {
            Network::Mean => self.l2_mu,
            Network::LogPrecision => self.l2_prec,
            Network::Weights => self.l2_w,
        }
    }

    fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            k_steps: self.k_steps,
            final_mean: false,
            init_mode: self.init_mode,
        }
    }
}

/// Diagnostics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub pos_fe: f64,
    pub neg_fe: f64,
    pub gap: f64,
    pub penalty: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
    pub grad_norm_psi: f64,
    /// Fraction of batch rows whose joint Gaussian precision is PD.
    pub pd_pass_frac: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str =
        "step,epoch,pos_fe,neg_fe,gap,penalty,grad_norm_theta,grad_norm_phi,grad_norm_psi,pd_pass_frac";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.pos_fe,
            self.neg_fe,
            self.gap,
            self.penalty,
            self.grad_norm_theta,
            self.grad_norm_phi,
            self.grad_norm_psi,
            self.pd_pass_frac
        )
    }
}

/// Gradient of one CD step plus its diagnostics (`step` and `epoch` unset).
#[derive(Debug, Clone)]
pub struct CdOutput<T> {
    pub grads: ModelGrads<T>,
    pub metrics: StepMetrics,
    /// The negative samples the step contrasted against.
    pub negatives: Tensor<T>,
}

/// Adds the L2 penalty and its gradient to `grads`; returns its value.
pub fn penalty_term<T: Real>(
    model: &NbmModel<T>,
    cond: &Conditioned<T>,
    cfg: &TrainConfig,
    grads: &mut ModelGrads<T>,
) -> Result<f64> {
    match cfg.penalty_mode {
        PenaltyMode::Outputs => output_penalty(model, cond, cfg, grads),
        PenaltyMode::WeightDecay => Ok(weight_decay(model, cfg, grads)),
    }
}

fn output_penalty<T: Real>(
    model: &NbmModel<T>,
    cond: &Conditioned<T>,
    cfg: &TrainConfig,
    grads: &mut ModelGrads<T>,
) -> Result<f64> {
    let (up, value) = output_penalty_upstream(model, cond, cfg);
    model.backward_params(cond, up, grads, Sign::Positive)?;
    Ok(value)
}

fn output_penalty_upstream<T: Real>(model: &NbmModel<T>, cond: &Conditioned<T>, cfg: &TrainConfig) -> (ParamGrads<T>, f64) {
    let n = cond.params.len();
    let (n_y, n_h) = (model.spec().n_y, model.spec().n_h);
    let mut up = ParamGrads::zeros(n, n_y, n_h);
    let (mut s_mu, mut s_prec, mut s_w) = (0.0, 0.0, 0.0);
    let c_mu = T::lit(2.0 * cfg.l2_mu / (n * n_y) as f64);
    let c_prec = T::lit(2.0 * cfg.l2_prec / (n * n_y) as f64);
    let c_w = T::lit(2.0 * cfg.l2_w / (n * n_y * n_h) as f64);
    for (r, p) in cond.params.iter().enumerate() {
        for (g, &m) in up.d_mu.row_mut(r).iter_mut().zip(p.mu()) {
            s_mu += m.as_f64().powi(2);
            *g = c_mu * m;
        }
        for (g, &q) in up.d_prec.row_mut(r).iter_mut().zip(p.prec()) {
            s_prec += q.as_f64().powi(2);
            *g = c_prec * q;
        }
        for (g, &w) in up.d_w.row_mut(r).iter_mut().zip(p.w()) {
            s_w += w.as_f64().powi(2);
            *g = c_w * w;
        }
    }
    let value = cfg.l2_mu * s_mu / (n * n_y) as f64
        + cfg.l2_prec * s_prec / (n * n_y) as f64
        + cfg.l2_w * s_w / (n * n_y * n_h) as f64;
    (up, value)
}

fn weight_decay<T: Real>(model: &NbmModel<T>, cfg: &TrainConfig, grads: &mut ModelGrads<T>) -> f64 {
    let mut value = 0.0;
    for net in Network::ALL {
        let c = cfg.coefficient(net);
        let mlp = model.net(net);
        let count = mlp.num_params() as f64;
        let scale = T::lit(2.0 * c / count);
        let mut sq = 0.0;
        for (slot, param) in grads.get_mut(net).slots_mut().iter_mut().zip(mlp.params()) {
            sq += param.sum_sq();
            for (g, &p) in slot.data_mut().iter_mut().zip(param.data()) {
                *g = *g + scale * p;
            }
        }
        value += c * sq / count;
    }
    value
}

/// One CD-k gradient. Chains for this step draw from `chain_seed`, one
/// stream per batch row.
pub fn cd_step<T: Real>(
    model: &NbmModel<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &TrainConfig,
    chain_seed: u64,
) -> Result<CdOutput<T>> {
    let cond = model.condition(x)?;
    let y_neg = sample_batch(&cond.params, &cfg.sample_options(), model.spec().visible_kind, chain_seed, 0)?;
    contrast(model, &cond, y, y_neg, cfg)
}

/// [`cd_step`] with caller-supplied negative samples.
pub fn cd_step_with_negatives<T: Real>(
    model: &NbmModel<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    y_neg: &Tensor<T>,
    cfg: &TrainConfig,
) -> Result<CdOutput<T>> {
    let cond = model.condition(x)?;
    contrast(model, &cond, y, y_neg.clone(), cfg)
}

fn contrast<T: Real>(
    model: &NbmModel<T>,
    cond: &Conditioned<T>,
    y: &Tensor<T>,
    y_neg: Tensor<T>,
    cfg: &TrainConfig,
) -> Result<CdOutput<T>> {
    cfg.validate()?;
    let n = cond.params.len();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    y.expect_cols(model.spec().n_y, "visible batch")?;
    y_neg.expect_cols(model.spec().n_y, "negative samples")?;
    if y.rows() != n || y_neg.rows() != n {
        return Err(Error::Shape(format!(
            "batch of {n}: {} data rows, {} negative rows",
            y.rows(),
            y_neg.rows()
        )));
    }
    // one backward pass for the data, sample and penalty terms together
    let weights = vec![T::one() / T::lit(n as f64); n];
    let (mut up, pos) = free_energy_upstream(&cond.params, y, &weights);
    let (neg_up, neg) = free_energy_upstream(&cond.params, &y_neg, &weights);
    up.add_scaled(&neg_up, -T::one())?;
    let mut grads = ModelGrads::zeros(model);
    let penalty = match cfg.penalty_mode {
        PenaltyMode::Outputs => {
            let (pen_up, value) = output_penalty_upstream(model, cond, cfg);
            up.add_scaled(&pen_up, T::one())?;
            model.backward_params(cond, up, &mut grads, Sign::Positive)?;
            value
        }
        PenaltyMode::WeightDecay => {
            model.backward_params(cond, up, &mut grads, Sign::Positive)?;
            weight_decay(model, cfg, &mut grads)
        }
    };
    grads.check_finite()?;
    let pd = cond.params.iter().filter(|p| pd_verdict_lowrank(p)).count();
    let (pos, neg) = (pos.as_f64(), neg.as_f64());
    Ok(CdOutput {
        metrics: StepMetrics {
            pos_fe: pos,
            neg_fe: neg,
            gap: pos - neg,
            penalty,
            grad_norm_theta: grads.mu.norm(),
            grad_norm_phi: grads.logp.norm(),
            grad_norm_psi: grads.w.norm(),
            pd_pass_frac: pd as f64 / n as f64,
            ..StepMetrics::default()
        },
        grads,
        negatives: y_neg,
    })
}

/// Adam moment estimates, laid out like [`ModelGrads`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub m: ModelGrads<T>,
    pub v: ModelGrads<T>,
    pub t: u64,
}

impl<T: Real> OptState<T> {
    pub fn new(model: &NbmModel<T>) -> Self {
        Self {
            m: ModelGrads::zeros(model),
            v: ModelGrads::zeros(model),
            t: 0,
        }
    }
}

/// One Adam update of every network from `grads`.
pub fn apply_update<T: Real>(
    model: &mut NbmModel<T>,
    opt: &mut OptState<T>,
    grads: &ModelGrads<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    grads.check_finite()?;
    opt.t += 1;
    let t = opt.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one, eps, lr) = (T::one(), T::lit(cfg.eps), T::lit(cfg.learning_rate));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    for net in Network::ALL {
        let params = model.net_mut(net).params_mut();
        let m = opt.m.get_mut(net).slots_mut();
        let v = opt.v.get_mut(net).slots_mut();
        let g = grads.get(net).slots();
        for (((p, m), v), g) in params.iter_mut().zip(m).zip(v).zip(g) {
            let it = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
            for (((p, m), v), &g) in it {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Mini-batch training loop with resumable state.
///
/// On a numeric error the step is abandoned before the update, so
/// [`Trainer::model`] still holds the last good parameters.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    model: NbmModel<T>,
    opt: OptState<T>,
    cfg: TrainConfig,
    step: u64,
    epoch: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: NbmModel<T>, cfg: TrainConfig) -> Result<Self> {
        let opt = OptState::new(&model);
        Self::resume(model, opt, cfg, 0, 0)
    }

    /// Continues from a saved model, optimizer state and position.
    pub fn resume(model: NbmModel<T>, opt: OptState<T>, cfg: TrainConfig, step: u64, epoch: u64) -> Result<Self> {
        cfg.validate()?;
        if opt.m.flatten().len() != model.num_params() || opt.v.flatten().len() != model.num_params() {
            return Err(Error::Shape("optimizer state does not match the model".into()));
        }
        Ok(Self {
            model,
            opt,
            cfg,
            step,
            epoch,
        })
    }

    pub fn model(&self) -> &NbmModel<T> {
        &self.model
    }

    pub fn opt_state(&self) -> &OptState<T> {
        &self.opt
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn into_parts(self) -> (NbmModel<T>, OptState<T>) {
        (self.model, self.opt)
    }

    pub fn chain_seed(&self, step: u64) -> u64 {
        mix_seed(mix_seed(self.cfg.seed, CHAIN_TAG), step)
    }

    /// The visiting order of `epoch`.
    pub fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.cfg.seed, SHUFFLE_TAG), epoch));
        order.shuffle(&mut rng);
        order
    }

    /// CD step plus Adam update on one batch.
    pub fn train_step(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<StepMetrics> {
        let out = cd_step(&self.model, x, y, &self.cfg, self.chain_seed(self.step))?;
        apply_update(&mut self.model, &mut self.opt, &out.grads, &self.cfg)?;
        let metrics = StepMetrics {
            step: self.step,
            epoch: self.epoch,
            ..out.metrics
        };
        self.step += 1;
        Ok(metrics)
    }

    fn done(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Runs until `epochs` or `max_steps`, calling `on_step` after each step.
    /// A resumed trainer restarts its current epoch from the beginning.
    pub fn fit(&mut self, data: &mut Dataset<T>, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        if data.kind != self.model.spec().visible_kind {
            return Err(Error::Config(format!(
                "{} dataset for a {} model",
                data.kind,
                self.model.spec().visible_kind
            )));
        }
        while !self.done() {
            data.refresh_noise(self.epoch);
            let order = self.epoch_order(self.epoch, data.len());
            for batch in order.chunks(self.cfg.batch_size) {
                if self.done() {
                    return Ok(());
                }
                let (x, y) = data.select(batch);
                let m = self.train_step(&x, &y)?;
                on_step(&m);
            }
            self.epoch += 1;
        }
        Ok(())
    }
}

/// Trains a fresh copy of `model`; returns it with the per-step metrics.
pub fn fit<T: Real>(
    model: NbmModel<T>,
    data: &mut Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(NbmModel<T>, Vec<StepMetrics>)> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut history = Vec::new();
    trainer.fit(data, |m| history.push(*m))?;
    Ok((trainer.into_parts().0, history))
}
