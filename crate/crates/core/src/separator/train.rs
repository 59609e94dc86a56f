//! Training loop: Adam, plateau schedule, early stopping and the
//! weight-tied to equilibrium stage switch.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::data::{Dataset, Example};
use super::model::SeparatorModel;
use super::spec::Variant;
use crate::deq::DeqMode;
use crate::error::{Error, Result};
use crate::solvers::SolverConfig;
use crate::tensor::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub segment_seconds: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier applied on a plateau.
    pub lr_decay_factor: f64,
    pub plateau_patience_epochs: usize,
    pub early_stop_patience_epochs: usize,
    pub pretrain_unroll_l: usize,
    /// Weight-tied pretraining epochs (equilibrium variant only).
    pub pretrain_epochs: usize,
    pub l_max_after_pretrain: usize,
    /// Epochs of the main stage.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            segment_seconds: 6.0,
            lr: 1e-3,
            weight_decay: 1e-5,
            lr_decay_factor: 0.3,
            plateau_patience_epochs: 80,
            early_stop_patience_epochs: 300,
            pretrain_unroll_l: 4,
            pretrain_epochs: 0,
            l_max_after_pretrain: 6,
            epochs: 1000,
            batch_size: 16,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule for the synthetic toy data: same shape as the
    /// default (weight-tied pretraining at L = 4, then l_max = 6), with
    /// epoch budgets and patiences shortened to match the small dataset.
    pub fn toy() -> Self {
        Self {
            segment_seconds: super::data::TOY_SECONDS,
            lr: 3e-3,
            plateau_patience_epochs: 10,
            early_stop_patience_epochs: 30,
            pretrain_epochs: 40,
            epochs: 100,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        pos("segment_seconds", self.segment_seconds)?;
        pos("lr", self.lr)?;
        pos("lr_decay_factor", self.lr_decay_factor)?;
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        for (name, v) in [
            ("plateau_patience_epochs", self.plateau_patience_epochs),
            ("early_stop_patience_epochs", self.early_stop_patience_epochs),
            ("pretrain_unroll_l", self.pretrain_unroll_l),
            ("l_max_after_pretrain", self.l_max_after_pretrain),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Weight-tied pretraining of the equilibrium core.
    PretrainWt,
    /// Equilibrium training.
    Deq,
    /// Single-stage training of the other variants.
    Standard,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::PretrainWt => "pretrain_wt",
            Stage::Deq => "deq",
            Stage::Standard => "standard",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain_wt" => Ok(Stage::PretrainWt),
            "deq" => Ok(Stage::Deq),
            "standard" => Ok(Stage::Standard),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, weight_decay: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let p = params.get(&name)?;
            let g = grads.get(&name)?.zip_map(p, "adam", |g, w| g + weight_decay * w)?;
            let m = self.m.get(&name)?.zip_map(&g, "adam", |m, g| b1 * m + (1.0 - b1) * g)?;
            let v = self.v.get(&name)?.zip_map(&g, "adam", |v, g| b2 * v + (1.0 - b2) * g * g)?;
            let step = m.zip_map(&v, "adam", |m, v| lr * (m / c1) / ((v / c2).sqrt() + eps))?;
            params.set(&name, p.sub(&step)?)?;
            self.m.set(&name, m)?;
            self.v.set(&name, v)?;
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub nfe_mean: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,stage,train_loss,val_loss,lr,nfe_mean";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:.6e},{:.6e},{:.3e},{:.2}",
            self.epoch, self.stage, self.train_loss, self.val_loss, self.lr, self.nfe_mean
        )
    }
}

/// Mutable training state beyond the model itself.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    /// Epochs completed in total.
    pub epoch: usize,
    /// Epochs completed in the current stage.
    pub stage_epoch: usize,
    pub lr: f64,
    pub best_val: f64,
    /// Epochs since the last improvement of the validation loss.
    pub since_best: usize,
    /// Epochs since the learning rate last improved or was reduced.
    pub plateau: usize,
    pub optimizer: Adam,
}

/// Drives training of one model, stage by stage.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SeparatorModel,
    pub config: TrainConfig,
    pub state: TrainState,
}

/// Equilibrium mode after pretraining: Broyden with `l_max` evaluations.
fn deq_mode_after(model: &SeparatorModel, l_max: usize) -> Result<DeqMode> {
    match model.spec_deq_mode()? {
        DeqMode::Equilibrium {
            solver,
            config,
            backward,
            backward_config,
        } => Ok(DeqMode::Equilibrium {
            solver,
            config: SolverConfig { l_max, ..config },
            backward,
            backward_config,
        }),
        other => Ok(other),
    }
}

impl Trainer {
    pub fn new(mut model: SeparatorModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let stage = match model.spec.variant {
            Variant::DeqUmx if config.pretrain_epochs > 0 => {
                model.set_deq_mode(DeqMode::WeightTied {
                    unroll: config.pretrain_unroll_l,
                })?;
                Stage::PretrainWt
            }
            Variant::DeqUmx => {
                let mode = deq_mode_after(&model, config.l_max_after_pretrain)?;
                model.set_deq_mode(mode)?;
                Stage::Deq
            }
            _ => Stage::Standard,
        };
        let optimizer = Adam::new(&model.params);
        Ok(Self {
            state: TrainState {
                stage,
                epoch: 0,
                stage_epoch: 0,
                lr: config.lr,
                best_val: f64::INFINITY,
                since_best: 0,
                plateau: 0,
                optimizer,
            },
            model,
            config,
        })
    }

    /// Resume from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = ckpt.model()?;
        match ckpt.state.stage {
            Stage::PretrainWt => model.set_deq_mode(DeqMode::WeightTied {
                unroll: config.pretrain_unroll_l,
            })?,
            Stage::Deq => {
                let mode = deq_mode_after(&model, config.l_max_after_pretrain)?;
                model.set_deq_mode(mode)?
            }
            Stage::Standard => {}
        }
        Ok(Self {
            model,
            config,
            state: ckpt.state.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.model, self.state.clone(), self.config.clone())
    }

    fn stage_budget(&self) -> usize {
        match self.state.stage {
            Stage::PretrainWt => self.config.pretrain_epochs,
            _ => self.config.epochs,
        }
    }

    /// Whether the current stage has finished.
    pub fn stage_done(&self) -> bool {
        self.state.stage_epoch >= self.stage_budget() || self.state.since_best >= self.config.early_stop_patience_epochs
    }

    /// Whether training has finished.
    pub fn done(&self) -> bool {
        self.state.stage != Stage::PretrainWt && self.stage_done()
    }

    /// Leave weight-tied pretraining. Parameters and optimizer moments are
    /// kept; learning rate, plateau and early-stopping counters restart.
    pub fn switch_to_deq(&mut self) -> Result<()> {
        let mode = deq_mode_after(&self.model, self.config.l_max_after_pretrain)?;
        self.model.set_deq_mode(mode)?;
        self.state.stage = Stage::Deq;
        self.state.stage_epoch = 0;
        self.state.lr = self.config.lr;
        self.state.best_val = f64::INFINITY;
        self.state.since_best = 0;
        self.state.plateau = 0;
        Ok(())
    }

    pub fn validation_loss(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        for ex in examples {
            total += self.model.eval_loss(&ex.mixture_magnitude(), &ex.target_magnitude())?;
        }
        Ok(total / examples.len() as f64)
    }

    /// One pass over the training set in shuffled minibatches.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochLog> {
        if data.train.is_empty() {
            return Err(Error::invalid("train", "empty training set"));
        }
        let epoch = self.state.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut nfe_sum = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let mixes: Vec<_> = batch.iter().map(|&i| data.train[i].mixture_magnitude()).collect();
            let targets: Vec<_> = batch.iter().map(|&i| data.train[i].target_magnitude()).collect();
            let (loss, grads, traces) = self.model.train_batch(&mixes, &targets).map_err(|e| numeric(e, epoch))?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            nfe_sum += traces.iter().map(|t| t.l_stop as f64).sum::<f64>();
            let (lr, wd) = (self.state.lr, self.config.weight_decay);
            self.state.optimizer.update(&mut self.model.params, &grads, lr, wd)?;
        }
        if self.model.params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::NanLoss { epoch });
        }
        let n = data.train.len() as f64;
        let val = self.validation_loss(&data.valid).map_err(|e| numeric(e, epoch))?;
        if val.is_nan() && !data.valid.is_empty() {
            return Err(Error::NanLoss { epoch });
        }
        let log = EpochLog {
            epoch,
            stage: self.state.stage,
            train_loss: loss_sum / n,
            val_loss: val,
            lr: self.state.lr,
            nfe_mean: nfe_sum / n,
        };
        self.observe(if data.valid.is_empty() { log.train_loss } else { val });
        self.state.epoch += 1;
        self.state.stage_epoch += 1;
        Ok(log)
    }

    fn observe(&mut self, val: f64) {
        let s = &mut self.state;
        if val < s.best_val {
            s.best_val = val;
            s.since_best = 0;
            s.plateau = 0;
        } else {
            s.since_best += 1;
            s.plateau += 1;
            if s.plateau >= self.config.plateau_patience_epochs {
                s.lr *= self.config.lr_decay_factor;
                s.plateau = 0;
            }
        }
    }

    /// Train to completion. `on_epoch` sees every log line and the trainer
    /// after the epoch (for checkpointing).
    pub fn train(&mut self, data: &Dataset, mut on_epoch: impl FnMut(&EpochLog, &Trainer) -> Result<()>) -> Result<Vec<EpochLog>> {
        let mut history = Vec::new();
        loop {
            if self.state.stage == Stage::PretrainWt && self.stage_done() {
                self.switch_to_deq()?;
            }
            if self.done() {
                break;
            }
            let log = self.run_epoch(data)?;
            on_epoch(&log, self)?;
            history.push(log);
        }
        Ok(history)
    }
}

/// Non-finite intermediate values during training count as a NaN loss.
fn numeric(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NanLoss { epoch },
        e => e,
    }
}

/// Mean of `f` over examples.
pub fn mean_over<F: FnMut(&Example) -> Result<f64>>(examples: &[Example], mut f: F) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        total += f(ex)?;
    }
    Ok(total / examples.len().max(1) as f64)
}
