//! Optimization: weighted BCE, AdamW, adaptive gradient clipping, cosine
//! learning-rate decay and early stopping over per-week graphs.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward_on_tape, ModelConfig, ModelParameters};
use crate::tensor::{sigmoid, ClassWeights, SparseRows, Tape, Tensor, Var};

/// Floor on the weight norm inside AGC so zero tensors can still move.
pub const AGC_WEIGHT_FLOOR: f64 = 1e-3;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Graph over checked traps only.
    Supervised,
    /// Graph over every trap; unchecked traps are feature-only nodes.
    SemiSupervised,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Supervised => "supervised",
            Regime::SemiSupervised => "semi-supervised",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Regime::Supervised),
            "semi-supervised" => Ok(Regime::SemiSupervised),
            other => Err(Error::Param(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub horizon: u32,
    pub epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub agc_lambda: f64,
    pub patience: usize,
    pub seed: u64,
    pub regime: Regime,
    /// Trailing share of training weeks held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 0,
            epochs: 200,
            base_lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 1e-4,
            agc_lambda: 0.01,
            patience: 20,
            seed: 1,
            regime: Regime::Supervised,
            validation_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.horizon > 7 {
            bad.push(format!("horizon {} outside 0..=7", self.horizon));
        }
        if self.epochs == 0 {
            bad.push("epochs must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            bad.push(format!(
                "need 0 < min_lr <= base_lr, got {} and {}",
                self.min_lr, self.base_lr
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad.push(format!(
                "weight_decay {} must be nonnegative",
                self.weight_decay
            ));
        }
        if !(self.agc_lambda > 0.0 && self.agc_lambda.is_finite()) {
            bad.push(format!("agc_lambda {} must be positive", self.agc_lambda));
        }
        if self.patience == 0 {
            bad.push("patience must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            bad.push(format!(
                "validation_fraction {} not in (0, 1)",
                self.validation_fraction
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Param(bad.join("; ")))
        }
    }
}

/// `w_c = N / (2·N_c)`: both classes carry total weight `N/2`.
pub fn class_weights(labels: &[bool]) -> Result<ClassWeights> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Data(format!(
            "class weights need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok(ClassWeights::new(n / (2.0 * neg), n / (2.0 * pos)))
}

pub fn cosine_lr(epoch: usize, total: usize, base_lr: f64, min_lr: f64) -> f64 {
    let t = epoch as f64 / total.max(1) as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescales `grad` so that `‖g‖ ≤ λ·max(‖w‖, 1e-3)`.
pub fn adaptive_gradient_clip(param: &Tensor, grad: &Tensor, agc_lambda: f64) -> Result<Tensor> {
    if param.shape() != grad.shape() {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match parameter {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    let g = grad.frobenius_norm();
    let cap = agc_lambda * param.frobenius_norm().max(AGC_WEIGHT_FLOOR);
    if g > 0.0 && g > cap {
        let s = cap / g;
        let values = grad.values().iter().map(|v| v * s).collect();
        Tensor::new(grad.shape().to_vec(), values)
    } else {
        Ok(grad.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

/// One AdamW update: decoupled decay `w ← w·(1 − lr·wd)` followed by the
/// bias-corrected Adam step.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[String],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(Error::Shape(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                names.get(i).map_or("?", String::as_str),
                g.shape(),
                params[i].shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {}",
                names.get(i).map_or("?", String::as_str)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.first_moment[i].values_mut();
        let v = state.second_moment[i].values_mut();
        for (j, (w, &g)) in p.values_mut().iter_mut().zip(grads[i].values()).enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Weighted BCE over the nodes with `labeled_mask[i]`; the label of an
/// unlabeled node is never read.
pub fn masked_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[bool],
    labeled_mask: &[bool],
    weights: ClassWeights,
) -> Result<Var> {
    if labels.len() != labeled_mask.len() {
        return Err(Error::Shape(format!(
            "{} labels but {} mask entries",
            labels.len(),
            labeled_mask.len()
        )));
    }
    let targets: Vec<Option<bool>> = labels
        .iter()
        .zip(labeled_mask)
        .map(|(&y, &m)| m.then_some(y))
        .collect();
    tape.masked_bce_with_logits(logits, &targets, weights)
}

/// One week of training data: graph weights, node features and the
/// horizon-shifted targets (`None` where the loss must ignore the node).
#[derive(Clone, Debug)]
pub struct WeekSample {
    pub week: u32,
    pub weights: Arc<SparseRows>,
    pub features: Tensor,
    pub targets: Vec<Option<bool>>,
}

impl WeekSample {
    pub fn labeled_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max-epochs",
            StopReason::EarlyStop => "early-stop",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// Zero-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRun {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub class_weights: ClassWeights,
}

impl TrainingRun {
    pub const LOG_HEADER: &'static str = "epoch,lr,train_loss,val_loss";

    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch].val_loss
    }

    pub fn log_csv(&self) -> String {
        let mut s = format!("{}\n", Self::LOG_HEADER);
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                e.epoch, e.lr, e.train_loss, e.val_loss
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub run: TrainingRun,
    /// Parameters at the epoch with the lowest validation loss.
    pub params: ModelParameters,
}

/// Splits samples chronologically into (train, validation) by distinct week.
pub fn chronological_split(
    samples: &[WeekSample],
    validation_fraction: f64,
) -> Result<(Vec<&WeekSample>, Vec<&WeekSample>)> {
    let mut weeks: Vec<u32> = samples.iter().map(|s| s.week).collect();
    weeks.sort_unstable();
    weeks.dedup();
    let n_val = ((weeks.len() as f64) * validation_fraction).ceil() as usize;
    if weeks.len() < 2 || n_val == 0 || n_val >= weeks.len() {
        return Err(Error::Data(format!(
            "{} training weeks cannot be split into train and validation",
            weeks.len()
        )));
    }
    let first_val = weeks[weeks.len() - n_val];
    let mut ordered: Vec<&WeekSample> = samples.iter().collect();
    ordered.sort_by_key(|s| s.week);
    let (train, val): (Vec<&WeekSample>, Vec<&WeekSample>) =
        ordered.into_iter().partition(|s| s.week < first_val);
    Ok((train, val))
}

fn dropout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Weighted BCE of `params` on one sample, evaluation mode.
pub fn sample_loss(
    params: &ModelParameters,
    config: &ModelConfig,
    sample: &WeekSample,
    weights: ClassWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape)?;
    let x = tape.constant(sample.features.clone())?;
    let mut rng = dropout_rng(0);
    let out = forward_on_tape(
        &mut tape,
        &vars,
        config,
        x,
        &sample.weights,
        false,
        &mut rng,
    )?;
    let loss = tape.masked_bce_with_logits(out.logits, &sample.targets, weights)?;
    tape.value(loss).item()
}

fn mean_loss(
    params: &ModelParameters,
    config: &ModelConfig,
    samples: &[&WeekSample],
    weights: ClassWeights,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples.iter().filter(|s| s.labeled_count() > 0) {
        let n = s.labeled_count();
        total += sample_loss(params, config, s, weights)? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Data(
            "validation weeks have no labeled targets".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Trains one model on `samples` (weeks in any order; they are visited
/// chronologically). The trailing `validation_fraction` of weeks drives
/// early stopping and the returned parameters are those with the lowest
/// validation loss.
pub fn train(
    model: &ModelConfig,
    samples: &[WeekSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if samples.iter().all(|s| s.labeled_count() == 0) {
        return Err(Error::Data(format!(
            "no labeled targets at horizon {}",
            cfg.horizon
        )));
    }
    let (train_set, val_set) = chronological_split(samples, cfg.validation_fraction)?;
    let train_labels: Vec<bool> = train_set
        .iter()
        .flat_map(|s| s.targets.iter().flatten().copied())
        .collect();
    let weights = class_weights(&train_labels)?;

    let mut params = ModelParameters::init(model, cfg.seed)?;
    let names = params.names();
    let mut state = OptimizerState::new(&params.tensors());
    let mut rng = dropout_rng(cfg.seed);
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, ModelParameters)> = None;
    let mut since_best = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.min_lr);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for sample in train_set.iter().filter(|s| s.labeled_count() > 0) {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape)?;
            let x = tape.constant(sample.features.clone())?;
            let out = forward_on_tape(&mut tape, &vars, model, x, &sample.weights, true, &mut rng)?;
            let loss = tape.masked_bce_with_logits(out.logits, &sample.targets, weights)?;
            let n = sample.labeled_count();
            loss_sum += tape.value(loss).item()? * n as f64;
            loss_count += n;
            tape.backward(loss)?;
            let grads = vars
                .grads(&tape)
                .iter()
                .zip(params.tensors())
                .map(|(g, w)| adaptive_gradient_clip(w, g, cfg.agc_lambda))
                .collect::<Result<Vec<_>>>()?;
            adamw_step(
                &mut params.tensors_mut(),
                &grads,
                &names,
                &mut state,
                lr,
                cfg.weight_decay,
            )?;
        }
        let train_loss = if loss_count > 0 {
            loss_sum / loss_count as f64
        } else {
            f64::NAN
        };
        let val_loss = mean_loss(&params, model, &val_set, weights)?;
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        match &best {
            Some((_, b, _)) if val_loss >= *b => since_best += 1,
            _ => {
                best = Some((epoch, val_loss, params.clone()));
                since_best = 0;
            }
        }
        if since_best >= cfg.patience {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        run: TrainingRun {
            epochs: records,
            best_epoch,
            stop_reason,
            class_weights: weights,
        },
        params: best_params,
    })
}

/// Independent runs, one per seed, executed in parallel.
pub fn train_ensemble(
    model: &ModelConfig,
    samples: &[WeekSample],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<TrainOutcome>> {
    if seeds.is_empty() {
        return Err(Error::Param("ensemble needs at least one seed".into()));
    }
    seeds
        .par_iter()
        .map(|&seed| train(model, samples, &TrainConfig { seed, ..*cfg }))
        .collect()
}

/// Per-node mean of member probabilities.
pub fn ensemble_mean(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Param("ensemble has no members".into()))?;
    if members.iter().any(|m| m.len() != first.len()) {
        return Err(Error::Shape(
            "ensemble members disagree on node count".into(),
        ));
    }
    let k = members.len() as f64;
    Ok((0..first.len())
        .map(|i| members.iter().map(|m| m[i]).sum::<f64>() / k)
        .collect())
}

/// Sigmoid probabilities of `params` on one sample, evaluation mode.
pub fn predict_sample(
    params: &ModelParameters,
    config: &ModelConfig,
    sample: &WeekSample,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape)?;
    let x = tape.constant(sample.features.clone())?;
    let mut rng = dropout_rng(0);
    let out = forward_on_tape(
        &mut tape,
        &vars,
        config,
        x,
        &sample.weights,
        false,
        &mut rng,
    )?;
    Ok(tape
        .value(out.logits)
        .values()
        .iter()
        .map(|&z| sigmoid(z))
        .collect())
}
