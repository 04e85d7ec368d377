//! Deterministic mini-batch training with SGD and momentum.
//!
//! Every random choice is drawn from a stream derived from the master seed
//! and the (epoch, batch) position, so an epoch can be replayed from a
//! snapshot of the weights and velocity alone.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, pgd, AttackSpec};
use crate::dataset::{batches, epoch_stream, DatasetHandle, LabeledBatch};
use crate::frn::{fr_from_logits, gamma_ce, rademacher_bounds, radius_from_logits, BoundInputs};
use crate::loat::{loat_grad_contrib, loat_loss, penalty_report, LoatSchedule, Phase};
use crate::math::{softmax_rows, RngStream};
use crate::mlp::{forward, init, logits, weight_gradients_sum, InitScale, MlpConfig, WeightSet};
use crate::objectives::{correct_mask, mixture_from_logits, risk_from_logits, trades_from_logits, ObjectiveSpec};
use crate::{Error, Result};

const ATTACK_STREAM: u64 = 0x4154_4b21;
const EVAL_STREAM: u64 = 0x4556_414c;

/// Which epochs get a full evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalPolicy {
    /// Evaluate every epoch up to and including this one.
    pub dense_until: usize,
    /// Afterwards evaluate every `every` epochs (and always the last one).
    pub every: usize,
    /// Additional epochs that are always evaluated.
    pub also: Vec<usize>,
}

impl Default for EvalPolicy {
    fn default() -> Self {
        EvalPolicy { dense_until: 0, every: 1, also: Vec::new() }
    }
}

impl EvalPolicy {
    pub fn due(&self, epoch: usize, last: usize) -> bool {
        epoch <= self.dense_until || epoch == last || (self.every > 0 && epoch.is_multiple_of(self.every)) || self.also.contains(&epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden_widths: Vec<usize>,
    pub init: InitScale,
    pub objective: ObjectiveSpec,
    /// Attack used to build adversarial training inputs.
    pub attack: AttackSpec,
    pub schedule: LoatSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    pub eval_attacks: Vec<AttackSpec>,
    pub eval: EvalPolicy,
    /// Measure per-epoch wall time. Timings are the only nondeterministic output.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_widths: vec![64],
            init: InitScale::He,
            objective: ObjectiveSpec::Standard,
            attack: AttackSpec::default(),
            schedule: LoatSchedule::off(),
            epochs: 10,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            seed: 0,
            checkpoint_every: None,
            eval_attacks: vec![AttackSpec::fgsm(AttackSpec::default().epsilon), AttackSpec::default()],
            eval: EvalPolicy::default(),
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |field: &str, e: Error| Error::Config { field: field.into(), detail: e.to_string() };
        let objective_field = match self.objective {
            ObjectiveSpec::Standard => "objective",
            ObjectiveSpec::Mixture { .. } => "objective.lambda",
            ObjectiveSpec::Trades { .. } => "objective.beta",
        };
        self.objective.validate().map_err(|e| field(objective_field, e))?;
        self.attack.validate().map_err(|e| field("attack", e))?;
        self.schedule.validate().map_err(|e| field("schedule", e))?;
        for (i, a) in self.eval_attacks.iter().enumerate() {
            a.validate().map_err(|e| field(&format!("eval_attacks[{i}]"), e))?;
        }
        let bad = |f: &str, detail: String| Err(Error::Config { field: f.into(), detail });
        if self.hidden_widths.contains(&0) {
            return bad("hidden_widths", "widths must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "need at least one epoch".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be a finite non-negative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every", "must be at least 1 when set".into());
        }
        if self.eval.every == 0 {
            return bad("eval.every", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn mlp_config(&self, data: &DatasetHandle) -> MlpConfig {
        let mut layer_widths = vec![data.dim()];
        layer_widths.extend(&self.hidden_widths);
        layer_widths.push(data.classes());
        MlpConfig { layer_widths, seed: self.seed, init: self.init }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdvAccuracy {
    pub attack: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub clean_train_loss: f64,
    pub clean_train_acc: f64,
    pub clean_test_loss: f64,
    pub clean_test_acc: f64,
    pub adv_test_acc: Vec<AdvAccuracy>,
    pub gamma_hat: f64,
    pub gamma_hat_c: Option<f64>,
    pub gamma_hat_m: Option<f64>,
    pub gamma_ce: Option<f64>,
    pub bound_lower: Option<f64>,
    pub bound_upper: Option<f64>,
    pub fr_radius: f64,
    pub epoch_wall_ms: Option<f64>,
    /// Batches in this epoch whose correct / wrong subset was empty while a
    /// penalty was scheduled.
    pub empty_correct_batches: usize,
    pub empty_wrong_batches: usize,
}

impl MetricsRecord {
    /// Accuracy under the first attack whose label matches `prefix`.
    pub fn adv_acc(&self, prefix: &str) -> Option<f64> {
        self.adv_test_acc.iter().find(|a| a.attack.starts_with(prefix)).map(|a| a.accuracy)
    }
}

/// `v ← m·v + g`, `w ← w − lr·v`.
pub fn sgd_step(w: &mut WeightSet, grads: &WeightSet, velocity: &mut WeightSet, lr: f64, momentum: f64) -> Result<()> {
    w.check_same_shape(grads, "sgd_step")?;
    w.check_same_shape(velocity, "sgd_step")?;
    for (v, g) in velocity.layers_mut().iter_mut().zip(grads.layers()) {
        v.scale_in_place(momentum);
        v.add_scaled(g, 1.0)?;
    }
    w.add_scaled(velocity, -lr)
}

fn adv_inputs(model: &WeightSet, batch: &LabeledBatch, spec: &AttackSpec, rng: &mut RngStream) -> Result<crate::math::Matrix> {
    if spec.is_fgsm() {
        fgsm(model, batch, spec.epsilon)
    } else {
        pgd(model, batch, spec, rng)
    }
}

/// Full-split metrics. Radius estimates and bounds use the training split.
pub fn evaluate(model: &WeightSet, data: &DatasetHandle, eval_attacks: &[AttackSpec], rng: &mut RngStream) -> Result<MetricsRecord> {
    let train_logits = logits(model, data.train.inputs())?;
    let train = risk_from_logits(&train_logits, data.train.labels())?;
    let test = risk_from_logits(&logits(model, data.test.inputs())?, data.test.labels())?;
    let est = radius_from_logits(&train_logits, data.train.labels())?;
    let fr = fr_from_logits(&train_logits, data.train.labels(), model.depth())?;
    let gce = gamma_ce(&est).ok();
    let bounds = BoundInputs::from_estimates(&est, data.classes()).and_then(|b| rademacher_bounds(&b)).ok();

    let mut adv_test_acc = Vec::with_capacity(eval_attacks.len());
    for spec in eval_attacks {
        let x = adv_inputs(model, &data.test, spec, rng)?;
        let acc = risk_from_logits(&logits(model, &x)?, data.test.labels())?.accuracy;
        adv_test_acc.push(AdvAccuracy { attack: spec.label(), accuracy: acc });
    }

    Ok(MetricsRecord {
        epoch: 0,
        clean_train_loss: train.mean_loss,
        clean_train_acc: train.accuracy,
        clean_test_loss: test.mean_loss,
        clean_test_acc: test.accuracy,
        adv_test_acc,
        gamma_hat: est.gamma_hat,
        gamma_hat_c: est.gamma_hat_c,
        gamma_hat_m: est.gamma_hat_m,
        gamma_ce: gce,
        bound_lower: bounds.map(|b| b.lower),
        bound_upper: bounds.map(|b| b.upper),
        fr_radius: fr.radius,
        epoch_wall_ms: None,
        empty_correct_batches: 0,
        empty_wrong_batches: 0,
    })
}

/// What happened during one pass over the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Scheduled training loss of each batch, in batch order.
    pub batch_losses: Vec<f64>,
    pub empty_correct_batches: usize,
    pub empty_wrong_batches: usize,
    pub wall_ms: f64,
}

/// Training state that can be advanced one epoch at a time and resumed from
/// a snapshot.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a DatasetHandle,
    weights: WeightSet,
    velocity: WeightSet,
    epochs_done: usize,
}

struct Step {
    loss: f64,
    empty_correct: bool,
    empty_wrong: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a DatasetHandle) -> Result<Self> {
        cfg.validate()?;
        let weights = init(&cfg.mlp_config(data))?;
        let velocity = weights.zeros_like();
        Ok(Trainer { cfg, data, weights, velocity, epochs_done: 0 })
    }

    /// Resumes after `epochs_done` completed epochs.
    pub fn resume(cfg: TrainConfig, data: &'a DatasetHandle, weights: WeightSet, velocity: WeightSet, epochs_done: usize) -> Result<Self> {
        cfg.validate()?;
        let expected = cfg.mlp_config(data).layer_widths;
        if weights.widths() != expected {
            return Err(Error::Consistency(format!("weights have widths {:?}, config implies {expected:?}", weights.widths())));
        }
        weights.check_same_shape(&velocity, "Trainer::resume")?;
        Ok(Trainer { cfg, data, weights, velocity, epochs_done })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }

    pub fn velocity(&self) -> &WeightSet {
        &self.velocity
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn into_weights(self) -> WeightSet {
        self.weights
    }

    fn step(&mut self, batch: &LabeledBatch, epoch: usize, index: usize) -> Result<Step> {
        let cfg = &self.cfg;
        let labels = batch.labels();
        let clean = forward(&self.weights, batch.inputs())?;
        let adv = if cfg.objective.needs_attack() {
            let mut rng = RngStream::derive(cfg.seed, ATTACK_STREAM, ((epoch as u64) << 32) | index as u64);
            let x = pgd(&self.weights, batch, &cfg.attack, &mut rng)?;
            Some(forward(&self.weights, &x)?)
        } else {
            None
        };
        let adv_logits = adv.as_ref().map(|t| t.logits());

        let mut value = match cfg.objective {
            ObjectiveSpec::Standard => mixture_from_logits(clean.logits(), None, labels, 0.0)?,
            ObjectiveSpec::Mixture { lambda } => mixture_from_logits(clean.logits(), adv_logits, labels, lambda)?,
            ObjectiveSpec::Trades { beta } => {
                let adv = adv_logits.expect("TRADES always attacks");
                trades_from_logits(clean.logits(), adv, labels, beta)?
            }
        };

        let mut step = Step { loss: value.loss, empty_correct: false, empty_wrong: false };
        if cfg.schedule.phase(epoch) != Phase::Idle {
            let mask = correct_mask(clean.logits(), labels);
            let paired = adv_logits.filter(|_| cfg.schedule.pairs_logits(epoch));
            let adv_probs = paired.map(softmax_rows);
            let pr = penalty_report(&softmax_rows(clean.logits()), labels, &mask, adv_probs.as_ref())?;
            step.loss = loat_loss(value.loss, epoch, &cfg.schedule, &pr);
            step.empty_correct = pr.p_c.is_none();
            step.empty_wrong = pr.p_m.is_none();
            let g = loat_grad_contrib(clean.logits(), labels, &mask, paired, epoch, &cfg.schedule)?;
            value.clean_grad.add_scaled(&g.clean, 1.0)?;
            if let Some(ga) = g.adv {
                match value.adv_grad.as_mut() {
                    Some(a) => a.add_scaled(&ga, 1.0)?,
                    None => value.adv_grad = Some(ga),
                }
            }
        }
        if !step.loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: index, loss: step.loss });
        }

        let mut parts = Vec::with_capacity(2);
        if value.clean_grad.max_abs() > 0.0 {
            parts.push((&clean, &value.clean_grad));
        }
        if let (Some(trace), Some(g)) = (&adv, &value.adv_grad) {
            parts.push((trace, g));
        }
        let grads = weight_gradients_sum(&self.weights, &parts)?;
        sgd_step(&mut self.weights, &grads, &mut self.velocity, cfg.lr, cfg.momentum)?;
        if !self.weights.layers().iter().all(|m| m.is_finite()) {
            return Err(Error::Divergence { epoch, batch: index, loss: step.loss });
        }
        Ok(step)
    }

    /// Runs the next epoch over shuffled mini-batches.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epochs_done + 1;
        let start = Instant::now();
        let mut rng = epoch_stream(self.cfg.seed, epoch);
        let mut log = EpochLog { epoch, batch_losses: Vec::new(), empty_correct_batches: 0, empty_wrong_batches: 0, wall_ms: 0.0 };
        for (index, batch) in batches(&self.data.train, self.cfg.batch_size, &mut rng).iter().enumerate() {
            let step = self.step(batch, epoch, index)?;
            log.batch_losses.push(step.loss);
            log.empty_correct_batches += step.empty_correct as usize;
            log.empty_wrong_batches += step.empty_wrong as usize;
        }
        log.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        self.epochs_done = epoch;
        Ok(log)
    }

    /// Evaluates the current weights and stamps the record with `log`.
    pub fn evaluate(&self, log: &EpochLog) -> Result<MetricsRecord> {
        let mut rng = RngStream::derive(self.cfg.seed, EVAL_STREAM, log.epoch as u64);
        let mut record = evaluate(&self.weights, self.data, &self.cfg.eval_attacks, &mut rng)?;
        record.epoch = log.epoch;
        record.epoch_wall_ms = self.cfg.record_timing.then_some(log.wall_ms);
        record.empty_correct_batches = log.empty_correct_batches;
        record.empty_wrong_batches = log.empty_wrong_batches;
        Ok(record)
    }

    pub fn checkpoint_due(&self) -> bool {
        self.cfg.checkpoint_every.is_some_and(|k| self.epochs_done.is_multiple_of(k))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: WeightSet,
    pub weights: WeightSet,
    pub history: Vec<MetricsRecord>,
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` after each one with the
/// record when the epoch was evaluated.
pub fn train_with(
    cfg: &TrainConfig,
    data: &DatasetHandle,
    mut on_epoch: impl FnMut(&Trainer, &EpochLog, Option<&MetricsRecord>) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let initial = trainer.weights().clone();
    let mut history = Vec::new();
    for _ in 0..cfg.epochs {
        let log = trainer.run_epoch()?;
        if cfg.eval.due(log.epoch, cfg.epochs) {
            let record = trainer.evaluate(&log)?;
            on_epoch(&trainer, &log, Some(&record))?;
            history.push(record);
        } else {
            on_epoch(&trainer, &log, None)?;
        }
    }
    Ok(TrainOutcome { initial, weights: trainer.into_weights(), history })
}

pub fn train(cfg: &TrainConfig, data: &DatasetHandle) -> Result<TrainOutcome> {
    train_with(cfg, data, |_, _, _| Ok(()))
}
