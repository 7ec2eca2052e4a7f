//! Joint ensemble training with per-member convergence freezing, the Adam
//! optimizer, and the adversarially augmented training variant.
//!
//! All members process the same mini-batch; every step updates every
//! member still marked active. A member whose held-out cross-entropy
//! stops improving is frozen: it keeps contributing predictions to the
//! shared objective but receives no further updates, and training stops
//! once every member has frozen. With both regularizer coefficients at
//! zero the joint run is bit-identical to training each member alone,
//! because nothing couples the member subgraphs.

use crate::attacks::{self, AttackConfig, AttackMethod};
use crate::data::Dataset;
use crate::diversity::{adp_gradients, AdpConfig};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::model::{Ensemble, MlpConfig, ModelParams};
use crate::rng;
use crate::tensor::{argmax, Tensor};
use serde::{Deserialize, Serialize};

/// Adam moment estimates for one member's parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    t: u64,
}

impl AdamState {
    /// Fresh state (zero moments) for the given architecture.
    pub fn new(cfg: &MlpConfig) -> Self {
        AdamState {
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
            t: 0,
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update of `params` against `grads`, advancing `state`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    if params.layers.len() != grads.layers.len() || params.layers.len() != state.m.layers.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            details: format!(
                "{} parameter layers, {} gradient layers, {} state layers",
                params.layers.len(),
                grads.layers.len(),
                state.m.layers.len()
            ),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (layer_idx, (pl, gl)) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        let ml = &mut state.m.layers[layer_idx];
        let vl = &mut state.v.layers[layer_idx];
        for (p, g, m, v) in [
            (&mut pl.weight, &gl.weight, &mut ml.weight, &mut vl.weight),
            (&mut pl.bias, &gl.bias, &mut ml.bias, &mut vl.bias),
        ] {
            if !p.same_shape(g) {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    details: format!(
                        "layer {layer_idx}: parameter {:?} vs gradient {:?}",
                        p.shape(),
                        g.shape()
                    ),
                });
            }
            for (idx, slot) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[idx];
                let mi = ADAM_BETA1 * m.data()[idx] + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v.data()[idx] + (1.0 - ADAM_BETA2) * gi * gi;
                m.data_mut()[idx] = mi;
                v.data_mut()[idx] = vi;
                *slot -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}

/// Which attack crafts the adversarial halves of augmented batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvTAttack {
    Fgsm,
    Pgd,
}

fn default_advt_eps_lo() -> f64 {
    0.01
}
fn default_advt_eps_hi() -> f64 {
    0.05
}

/// Adversarial-training augmentation: each mini-batch is doubled with
/// counterparts crafted against the current ensemble at a per-example
/// budget drawn uniformly from `[eps_lo, eps_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvTConfig {
    /// Crafting attack.
    pub attack: AdvTAttack,
    /// Lower edge of the per-example budget range.
    #[serde(default = "default_advt_eps_lo")]
    pub eps_lo: f64,
    /// Upper edge of the per-example budget range.
    #[serde(default = "default_advt_eps_hi")]
    pub eps_hi: f64,
}

impl AdvTConfig {
    /// Checks `0 < eps_lo <= eps_hi < 1`.
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_lo > 0.0 && self.eps_lo <= self.eps_hi && self.eps_hi < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "advt budget range must satisfy 0 < lo <= hi < 1, got [{}, {}]",
                self.eps_lo, self.eps_hi
            )));
        }
        Ok(())
    }
}

fn default_learning_rate() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    64
}
fn default_freeze_patience() -> usize {
    5
}
fn default_freeze_tolerance() -> f64 {
    1e-4
}

/// Everything a training run needs besides the model and the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Shared Adam learning rate.
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Mini-batch size.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Maximum epochs (training can stop earlier if every member freezes).
    pub epochs: usize,
    /// Master seed for batch order, validation split, and augmentation.
    pub seed: u64,
    /// Regularizer coefficients.
    pub adp: AdpConfig,
    /// Epochs without improvement before a member freezes.
    #[serde(default = "default_freeze_patience")]
    pub freeze_patience: usize,
    /// Minimum held-out cross-entropy improvement that resets patience.
    #[serde(default = "default_freeze_tolerance")]
    pub freeze_tolerance: f64,
    /// Optional adversarial augmentation.
    #[serde(default)]
    pub advt: Option<AdvTConfig>,
}

impl TrainConfig {
    /// A config with every knob at its default.
    pub fn new(epochs: usize, seed: u64, adp: AdpConfig) -> Self {
        TrainConfig {
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            epochs,
            seed,
            adp,
            freeze_patience: default_freeze_patience(),
            freeze_tolerance: default_freeze_tolerance(),
            advt: None,
        }
    }

    /// Validates every field, including the embedded configs.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.freeze_patience < 1 {
            return Err(Error::InvalidArgument(
                "freeze_patience must be >= 1".into(),
            ));
        }
        if !(self.freeze_tolerance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "freeze_tolerance must be >= 0, got {}",
                self.freeze_tolerance
            )));
        }
        self.adp.validated()?;
        if let Some(advt) = &self.advt {
            advt.validate()?;
        }
        Ok(())
    }
}

/// End-of-epoch measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Epoch index, zero-based.
    pub epoch: usize,
    /// Objective averaged over every example seen this epoch.
    pub mean_objective: f64,
    /// Per-member accuracy on the training split.
    pub member_train_accuracy: Vec<f64>,
    /// Ensemble accuracy on the training split.
    pub ensemble_accuracy: f64,
    /// Median `ln ED` over the training split.
    pub median_ln_ed: f64,
    /// Per-member held-out cross-entropy.
    pub validation_ce: Vec<f64>,
    /// Which members were still receiving updates during this epoch.
    pub active: Vec<bool>,
}

/// Full record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// One entry per completed epoch.
    pub epochs: Vec<EpochStats>,
    /// Epoch at which each member froze (`None` = ran to the end).
    pub freeze_epoch: Vec<Option<usize>>,
    /// Examples whose adversarial counterpart fell back to the clean
    /// input because crafting failed.
    pub advt_fallbacks: usize,
}

/// Doubles a batch with adversarial counterparts crafted against the
/// current ensemble. Example `i`'s budget and (for pgd) random start are
/// functions of `(seed, index_base + i)`, so batch boundaries never
/// change a craft. Returns the augmented batch plus the count of examples
/// that fell back to their clean value because crafting failed.
pub fn advt_augment(
    ens: &Ensemble,
    x: &Tensor,
    y: &[usize],
    cfg: &AdvTConfig,
    seed: u64,
    index_base: u64,
) -> Result<(Tensor, Vec<usize>, usize)> {
    cfg.validate()?;
    let (n, d) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(Error::ShapeMismatch {
            op: "advt_augment",
            details: format!("{} labels for {n} examples", y.len()),
        });
    }
    let mut out = Tensor::zeros(2 * n, d);
    out.data_mut()[..n * d].copy_from_slice(x.data());
    let mut fallbacks = 0;
    for i in 0..n {
        let index = index_base + i as u64;
        let mut eps_rng = rng::stream(seed, "advt-eps", index);
        let eps = rng::uniform(&mut eps_rng, cfg.eps_lo, cfg.eps_hi);
        let mut atk = AttackConfig::new(match cfg.attack {
            AdvTAttack::Fgsm => AttackMethod::Fgsm,
            AdvTAttack::Pgd => AttackMethod::Pgd,
        });
        atk.eps = eps;
        let row = Tensor::new(1, d, x.row_slice(i).to_vec())?;
        let crafted = attacks::run_attack(ens, &row, &y[i..=i], &atk, seed, index);
        let slot = &mut out.data_mut()[(n + i) * d..(n + i + 1) * d];
        match crafted {
            Ok(batch) => slot.copy_from_slice(batch.adversarials.row_slice(0)),
            Err(_) => {
                slot.copy_from_slice(x.row_slice(i));
                fallbacks += 1;
            }
        }
    }
    let mut labels = y.to_vec();
    labels.extend_from_slice(y);
    Ok((out, labels, fallbacks))
}

/// Deterministic 10% validation split: returns `(train, val)` index sets.
fn validation_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng::stream(seed, "val-split", 0);
    let perm = rng::shuffled_indices(n, &mut r);
    let val_count = (n / 10).max(1);
    let val = perm[..val_count].to_vec();
    let train = perm[val_count..].to_vec();
    (train, val)
}

/// Mean cross-entropy of member `k` on the given examples.
fn member_ce(ens: &Ensemble, k: usize, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let probs = ens.predict_member(k, features)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total -= probs.at(i, y).max(1e-300).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Trains `ens` on `data`: every active member takes an Adam step on the
/// shared objective for each mini-batch, and members freeze individually
/// once their held-out cross-entropy stalls. Returns the trained ensemble
/// and the per-epoch record.
pub fn adp_train(mut ens: Ensemble, data: &Dataset, cfg: &TrainConfig) -> Result<(Ensemble, TrainReport)> {
    cfg.validate()?;
    if data.len() == 0 {
        return Err(Error::Empty("training dataset"));
    }
    if data.num_classes() != ens.config().num_classes {
        return Err(Error::ShapeMismatch {
            op: "adp_train",
            details: format!(
                "dataset has {} classes, model {}",
                data.num_classes(),
                ens.config().num_classes
            ),
        });
    }
    if data.dim() != ens.config().input_dim {
        return Err(Error::ShapeMismatch {
            op: "adp_train",
            details: format!(
                "dataset dimension {} vs model input {}",
                data.dim(),
                ens.config().input_dim
            ),
        });
    }

    let k = ens.len();
    let n = data.len();
    let (train_idx, val_idx) = validation_split(n, cfg.seed);
    let train_set = data.subset(&train_idx)?;
    let val_set = data.subset(&val_idx)?;
    let train_n = train_set.len();

    let mut states: Vec<AdamState> = (0..k).map(|_| AdamState::new(ens.config())).collect();
    let mut active = vec![true; k];
    let mut best_val = vec![f64::INFINITY; k];
    let mut stall = vec![0usize; k];
    let mut freeze_epoch: Vec<Option<usize>> = vec![None; k];
    let mut report = TrainReport {
        epochs: Vec::new(),
        freeze_epoch: vec![None; k],
        advt_fallbacks: 0,
    };

    for epoch in 0..cfg.epochs {
        let active_at_start = active.clone();
        let mut order_rng = rng::stream(cfg.seed, "batch-order", epoch as u64);
        let order = rng::shuffled_indices(train_n, &mut order_rng);

        let mut objective_total = 0.0;
        let mut example_total = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let global_order: Vec<usize> = chunk.to_vec();
            let batch = train_set.subset(&global_order)?;
            let (bx, by, fallbacks) = match &cfg.advt {
                None => (batch.features().clone(), batch.labels().to_vec(), 0),
                Some(advt) => {
                    let index_base =
                        (epoch * train_n + batch_no * cfg.batch_size) as u64;
                    advt_augment(&ens, batch.features(), batch.labels(), advt, cfg.seed, index_base)?
                }
            };
            report.advt_fallbacks += fallbacks;

            let (objective, grads) = adp_gradients(&ens, &bx, &by, &cfg.adp, &active)?;
            if !objective.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite objective {objective} at epoch {epoch}, batch {batch_no}"
                )));
            }
            // A poisoned forward can keep the objective finite (the log is
            // floored) while the backward pass explodes, so gradients are
            // checked too.
            for (member, grad) in grads.iter().enumerate() {
                if let Some(g) = grad {
                    let finite = g
                        .layers
                        .iter()
                        .all(|l| l.weight.is_finite() && l.bias.is_finite());
                    if !finite {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient for member {member} at epoch {epoch}, \
                             batch {batch_no}"
                        )));
                    }
                }
            }
            objective_total += objective * bx.rows() as f64;
            example_total += bx.rows();

            for (member, grad) in grads.into_iter().enumerate() {
                if let Some(g) = grad {
                    adam_step(
                        &mut ens.members_mut()[member],
                        &g,
                        &mut states[member],
                        cfg.learning_rate,
                    )?;
                }
            }
        }

        // End-of-epoch bookkeeping: training-split metrics, held-out
        // cross-entropy, and the freezing decision per member.
        let acc = evaluation::accuracy(&ens, &train_set)?;
        let ln_ed =
            evaluation::ln_diversity_values(&ens, train_set.features(), train_set.labels())?;
        let mut validation_ce = Vec::with_capacity(k);
        for member in 0..k {
            validation_ce.push(member_ce(&ens, member, val_set.features(), val_set.labels())?);
        }
        report.epochs.push(EpochStats {
            epoch,
            mean_objective: objective_total / example_total as f64,
            member_train_accuracy: acc.members,
            ensemble_accuracy: acc.ensemble,
            median_ln_ed: evaluation::median(&ln_ed)?,
            validation_ce: validation_ce.clone(),
            active: active_at_start,
        });

        for member in 0..k {
            if !active[member] {
                continue;
            }
            if best_val[member] - validation_ce[member] > cfg.freeze_tolerance {
                best_val[member] = validation_ce[member];
                stall[member] = 0;
            } else {
                stall[member] += 1;
                if stall[member] >= cfg.freeze_patience {
                    active[member] = false;
                    freeze_epoch[member] = Some(epoch);
                }
            }
        }
        if active.iter().all(|a| !a) {
            break;
        }
    }

    report.freeze_epoch = freeze_epoch;
    Ok((ens, report))
}

/// Quick ensemble accuracy used by tests; prefer [`evaluation::accuracy`]
/// for reporting.
pub fn train_accuracy(ens: &Ensemble, data: &Dataset) -> Result<f64> {
    let probs = ens.predict_ensemble(data.features())?;
    let hits = (0..data.len())
        .filter(|&i| argmax(probs.row_slice(i)) == data.labels()[i])
        .count();
    Ok(hits as f64 / data.len() as f64)
}
