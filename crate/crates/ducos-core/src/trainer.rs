//! Dual-ascent constrained training: SGD/Adam on the network weights against
//! the Lagrangian, with per-epoch multiplier ascent on the constraint losses
//! and a linearly decaying multiplier step size.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::image::NormCtx;
use crate::losses::{bundle_from, lagrangian_total, loss_cf, loss_gr, loss_rec, LossBundle, LossVars};
use crate::network::{DuCosModel, ModelConfig};
use crate::real::Real;
use crate::rng::Rng;
use crate::scene::SamplePair;
use crate::tensor::Tape;

/// How the multiplier step size decays over the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    /// eta(t) = eta0 * (1 - t/T), recomputed from the initial value.
    RecomputeFromInitial,
    /// eta <- eta * (1 - t/T), compounding the current value.
    LiteralCompounding,
}

/// Lagrange multipliers plus their ascent step sizes and decay clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualState {
    pub lambda: f64,
    pub mu: f64,
    pub eta_lambda: f64,
    pub eta_mu: f64,
    pub eta_lambda0: f64,
    pub eta_mu0: f64,
    /// Completed dual updates.
    pub t: usize,
    /// Horizon T for the decay schedule.
    pub horizon: usize,
    pub schedule: ScheduleMode,
}

impl DualState {
    pub fn new(
        lambda0: f64,
        mu0: f64,
        eta_lambda0: f64,
        eta_mu0: f64,
        horizon: usize,
        schedule: ScheduleMode,
    ) -> Result<Self> {
        if lambda0 < 0.0 || mu0 < 0.0 || eta_lambda0 < 0.0 || eta_mu0 < 0.0 {
            return Err(CoreError::InvalidArgument(String::from(
                "dual state requires nonnegative multipliers and step sizes",
            )));
        }
        if horizon == 0 {
            return Err(CoreError::InvalidArgument(String::from(
                "dual horizon must be >= 1",
            )));
        }
        Ok(DualState {
            lambda: lambda0,
            mu: mu0,
            eta_lambda: eta_lambda0,
            eta_mu: eta_mu0,
            eta_lambda0,
            eta_mu0,
            horizon,
            t: 0,
            schedule,
        })
    }

    /// Apply the decay schedule for the current step index.
    pub fn step_schedule(&mut self) {
        let decay = 1.0 - (self.t as f64 / self.horizon as f64).min(1.0);
        match self.schedule {
            ScheduleMode::RecomputeFromInitial => {
                self.eta_lambda = self.eta_lambda0 * decay;
                self.eta_mu = self.eta_mu0 * decay;
            }
            ScheduleMode::LiteralCompounding => {
                self.eta_lambda *= decay;
                self.eta_mu *= decay;
            }
        }
    }

    /// One dual-ascent update from the measured constraint losses:
    /// decay the step sizes, ascend, clamp at zero, advance the clock.
    pub fn step_dual(&mut self, l_cf: f64, l_gr: f64) {
        self.step_schedule();
        self.lambda = (self.lambda + self.eta_lambda * l_cf).max(0.0);
        self.mu = (self.mu + self.eta_mu * l_gr).max(0.0);
        self.t += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Samples averaged per primal step; the whole dataset is one epoch.
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// eta_omega, the primal step size.
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub lambda0: f64,
    pub mu0: f64,
    pub eta_lambda0: f64,
    pub eta_mu0: f64,
    pub schedule: ScheduleMode,
    /// Drop the alignment term entirely (constraint and multiplier).
    pub disable_cf_loss: bool,
    /// Drop the gradient term entirely.
    pub disable_gr_loss: bool,
    /// Skip dual ascent; multipliers stay at their initial values.
    pub fixed_multipliers: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 10,
            batch_size: 1,
            optimizer: Optimizer::Sgd,
            lr: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            lambda0: 0.01,
            mu0: 0.05,
            eta_lambda0: 0.01,
            eta_mu0: 0.01,
            schedule: ScheduleMode::RecomputeFromInitial,
            disable_cf_loss: false,
            disable_gr_loss: false,
            fixed_multipliers: false,
        }
    }
}

/// One row of training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_cf: f64,
    pub l_gr: f64,
    pub lambda: f64,
    pub mu: f64,
    pub eta_lambda: f64,
    pub eta_mu: f64,
}

struct AdamState<R> {
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
    t: usize,
}

/// Owns the optimizer state across primal steps.
pub struct Trainer<R> {
    pub config: TrainConfig,
    adam: Option<AdamState<R>>,
}

impl<R: Real> Trainer<R> {
    pub fn new(config: TrainConfig) -> Self {
        Trainer { config, adam: None }
    }

    /// Forward + losses for one sample on a fresh tape. Returns the tape
    /// handles and the valid-pixel count so callers can run backward.
    pub fn eval_sample(
        &self,
        model: &DuCosModel<R>,
        tape: &mut Tape<R>,
        binding: &crate::network::Binding,
        sample: &SamplePair<R>,
        dual: &DualState,
    ) -> Result<(LossVars, usize)> {
        let mut norm = NormCtx::live();
        let out = model.forward(tape, binding, &sample.x, &sample.prompts, &mut norm)?;
        let (rec, n_valid) = loss_rec(tape, out.y, &sample.z)?;
        let cf = if self.config.disable_cf_loss {
            None
        } else {
            Some(loss_cf(tape, &out.traces)?)
        };
        let gr = if self.config.disable_gr_loss {
            None
        } else {
            Some(loss_gr(
                tape,
                out.y,
                &sample.prompts.relative_depth,
                &mut norm,
                model.config.grad_op,
            )?)
        };
        let total = lagrangian_total(
            tape,
            rec,
            cf,
            gr,
            R::from_f64(dual.lambda),
            R::from_f64(dual.mu),
        )?;
        Ok((
            LossVars {
                rec,
                cf,
                gr,
                total,
            },
            n_valid,
        ))
    }

    /// One primal step: accumulate batch-mean gradients of the Lagrangian
    /// and apply the optimizer. Returns the batch-mean loss values.
    pub fn step_primal(
        &mut self,
        model: &mut DuCosModel<R>,
        batch: &[&SamplePair<R>],
        dual: &DualState,
    ) -> Result<LossBundle> {
        if batch.is_empty() {
            return Err(CoreError::InvalidArgument(String::from("empty batch")));
        }
        let n_params = model.params.len();
        let mut acc: Vec<Vec<R>> = model
            .params
            .params
            .iter()
            .map(|p| vec![R::ZERO; p.array.numel()])
            .collect();
        let mut sum = LossBundle {
            l_rec: 0.0,
            l_cf: 0.0,
            l_gr: 0.0,
            lagrangian: 0.0,
            n_valid: 0,
        };
        let inv = R::ONE / R::from_usize(batch.len());
        for sample in batch {
            let mut tape: Tape<R> = Tape::new();
            let binding = model.bind(&mut tape);
            let (vars, n_valid) = self.eval_sample(model, &mut tape, &binding, sample, dual)?;
            let bundle = bundle_from(&tape, &vars, n_valid);
            if !bundle.lagrangian.is_finite() {
                return Err(CoreError::NonFinite(String::from(
                    "non-finite loss during primal step",
                )));
            }
            sum.l_rec += bundle.l_rec;
            sum.l_cf += bundle.l_cf;
            sum.l_gr += bundle.l_gr;
            sum.lagrangian += bundle.lagrangian;
            sum.n_valid += bundle.n_valid;
            let grads = tape.backward(vars.total)?;
            for (i, a) in acc.iter_mut().enumerate() {
                if let Some(g) = grads.get(binding.vars[i]) {
                    for (av, &gv) in a.iter_mut().zip(g.iter()) {
                        *av += inv * gv;
                    }
                }
            }
        }
        for a in &acc {
            for v in a {
                if !v.is_finite() {
                    return Err(CoreError::NonFinite(String::from(
                        "non-finite gradient during primal step",
                    )));
                }
            }
        }
        match self.config.optimizer {
            Optimizer::Sgd => model.sgd_step(&acc, R::from_f64(self.config.lr)),
            Optimizer::Adam => self.adam_step(model, &acc, n_params),
        }
        let k = batch.len() as f64;
        Ok(LossBundle {
            l_rec: sum.l_rec / k,
            l_cf: sum.l_cf / k,
            l_gr: sum.l_gr / k,
            lagrangian: sum.lagrangian / k,
            n_valid: sum.n_valid,
        })
    }

    fn adam_step(&mut self, model: &mut DuCosModel<R>, grads: &[Vec<R>], n_params: usize) {
        let st = self.adam.get_or_insert_with(|| AdamState {
            m: grads.iter().map(|g| vec![R::ZERO; g.len()]).collect(),
            v: grads.iter().map(|g| vec![R::ZERO; g.len()]).collect(),
            t: 0,
        });
        st.t += 1;
        let b1 = R::from_f64(self.config.adam_beta1);
        let b2 = R::from_f64(self.config.adam_beta2);
        let eps = R::from_f64(self.config.adam_eps);
        let lr = R::from_f64(self.config.lr);
        let bc1 = R::ONE - R::from_f64(libm::pow(self.config.adam_beta1, st.t as f64));
        let bc2 = R::ONE - R::from_f64(libm::pow(self.config.adam_beta2, st.t as f64));
        for i in 0..n_params {
            let p = &mut model.params.params[i].array.data;
            for j in 0..p.len() {
                let g = grads[i][j];
                st.m[i][j] = b1 * st.m[i][j] + (R::ONE - b1) * g;
                st.v[i][j] = b2 * st.v[i][j] + (R::ONE - b2) * g * g;
                let mh = st.m[i][j] / bc1;
                let vh = st.v[i][j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Full training loop. Each epoch sweeps the dataset in shuffled batches,
/// then performs one dual update from the epoch-mean constraint losses.
/// The optional callback sees the model after every epoch.
pub fn train<R: Real>(
    model: &mut DuCosModel<R>,
    data: &[SamplePair<R>],
    config: &TrainConfig,
    mut on_epoch: Option<&mut dyn FnMut(usize, &DuCosModel<R>, &EpochRecord)>,
) -> Result<Vec<EpochRecord>> {
    if data.is_empty() {
        return Err(CoreError::InvalidArgument(String::from(
            "training set is empty",
        )));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(CoreError::InvalidArgument(String::from(
            "batch_size and epochs must be >= 1",
        )));
    }
    let mut trainer: Trainer<R> = Trainer::new(config.clone());
    let mut dual = DualState::new(
        config.lambda0,
        config.mu0,
        config.eta_lambda0,
        config.eta_mu0,
        config.epochs,
        config.schedule,
    )?;
    if config.disable_cf_loss {
        dual.lambda = 0.0;
    }
    if config.disable_gr_loss {
        dual.mu = 0.0;
    }
    let mut rng = Rng::seed_from_u64(config.seed ^ 0x7e41_11);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        // Fisher-Yates shuffle
        for i in (1..order.len()).rev() {
            let j = rng.uniform_usize(0, i);
            order.swap(i, j);
        }
        let mut ep = LossBundle {
            l_rec: 0.0,
            l_cf: 0.0,
            l_gr: 0.0,
            lagrangian: 0.0,
            n_valid: 0,
        };
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SamplePair<R>> = chunk.iter().map(|&i| &data[i]).collect();
            let b = trainer.step_primal(model, &batch, &dual)?;
            ep.l_rec += b.l_rec;
            ep.l_cf += b.l_cf;
            ep.l_gr += b.l_gr;
            ep.lagrangian += b.lagrangian;
            n_batches += 1;
        }
        let k = n_batches as f64;
        let (mean_cf, mean_gr) = (ep.l_cf / k, ep.l_gr / k);
        if !config.fixed_multipliers {
            dual.step_dual(
                if config.disable_cf_loss { 0.0 } else { mean_cf },
                if config.disable_gr_loss { 0.0 } else { mean_gr },
            );
        }
        let rec = EpochRecord {
            epoch,
            l_rec: ep.l_rec / k,
            l_cf: mean_cf,
            l_gr: mean_gr,
            lambda: dual.lambda,
            mu: dual.mu,
            eta_lambda: dual.eta_lambda,
            eta_mu: dual.eta_mu,
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(epoch, model, &rec);
        }
        history.push(rec);
    }
    Ok(history)
}
