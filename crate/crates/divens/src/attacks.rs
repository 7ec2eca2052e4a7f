//! Gradient-based and saliency-based adversarial attacks.
//!
//! Seven methods share one configuration type: the signed-gradient family
//! (`fgsm`, `bim`, `pgd`, `mim`) walks inside an L-infinity ball, `jsma`
//! flips a budgeted number of individual features, and the optimizer
//! family (`cw`, `ead`) searches in tanh space for small-distortion
//! examples. Every attack works against either the whole ensemble or a
//! single designated member, in untargeted or targeted mode, and is a pure
//! function of `(victim, example, seed, example index)` — batching and
//! parallel scheduling can never change a result.

use crate::error::{Error, Result};
use crate::model::{Ensemble, MemberVars};
use crate::rng;
use crate::tape::{Graph, Var};
use crate::tensor::{argmax, Tensor};
use serde::{Deserialize, Serialize};

/// Slack allowed on the L-infinity ball invariant when verifying outputs.
pub const BALL_TOL: f64 = 1e-9;

/// Offset under the log when deriving ensemble "logits" from averaged
/// probabilities.
const ENSEMBLE_LOGIT_OFFSET: f64 = 1e-12;

/// Probabilities are pulled this far off the boundary before an inverse
/// tanh remap.
const ATANH_MARGIN: f64 = 1e-6;

/// Attack target: the averaged ensemble or one member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Victim {
    /// Attack the averaged prediction (gradients flow through every member).
    Ensemble,
    /// Attack member `k` alone (substitute-model setting).
    Member(usize),
}

/// Which attack to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Pgd,
    Mim,
    Jsma,
    Cw,
    Ead,
}

fn default_momentum() -> f64 {
    1.0
}
fn default_jsma_theta() -> f64 {
    0.2
}
fn default_jsma_gamma() -> f64 {
    0.2
}
fn default_cw_c() -> f64 {
    1.0
}
fn default_ead_beta() -> f64 {
    0.01
}
fn default_opt_lr() -> f64 {
    0.01
}
fn default_opt_steps() -> usize {
    1000
}
fn default_steps() -> usize {
    10
}
fn default_pgd_init_scale() -> f64 {
    1.0
}
fn default_victim() -> Victim {
    Victim::Ensemble
}

/// Full attack specification. Fields irrelevant to the chosen method are
/// ignored; `step_size` defaults to `eps / steps` when unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Attack method.
    pub method: AttackMethod,
    /// L-infinity budget for fgsm/bim/pgd/mim.
    #[serde(default)]
    pub eps: f64,
    /// Iteration count for the signed-gradient family.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Per-iteration step; `None` means `eps / steps`.
    #[serde(default)]
    pub step_size: Option<f64>,
    /// Momentum decay for mim.
    #[serde(default = "default_momentum")]
    pub momentum_decay: f64,
    /// Per-feature perturbation applied by jsma (sign included).
    #[serde(default = "default_jsma_theta")]
    pub jsma_theta: f64,
    /// Maximum fraction of features jsma may modify.
    #[serde(default = "default_jsma_gamma")]
    pub jsma_gamma: f64,
    /// Margin weight in the cw/ead objective.
    #[serde(default = "default_cw_c")]
    pub cw_c: f64,
    /// Confidence floor in the cw/ead margin.
    #[serde(default)]
    pub cw_kappa: f64,
    /// L1 weight in the ead objective.
    #[serde(default = "default_ead_beta")]
    pub ead_beta: f64,
    /// Optimizer learning rate for cw/ead.
    #[serde(default = "default_opt_lr")]
    pub opt_lr: f64,
    /// Optimizer iterations for cw/ead.
    #[serde(default = "default_opt_steps")]
    pub opt_steps: usize,
    /// Targeted mode: drive predictions toward `target_label`.
    #[serde(default)]
    pub targeted: bool,
    /// Shared target class for targeted mode.
    #[serde(default)]
    pub target_label: Option<usize>,
    /// Who is attacked.
    #[serde(default = "default_victim")]
    pub victim: Victim,
    /// Scale on pgd's random start (diagnostic; 0 collapses pgd to bim).
    #[serde(default = "default_pgd_init_scale")]
    pub pgd_init_scale: f64,
}

impl AttackConfig {
    /// A config for `method` with every knob at its default.
    pub fn new(method: AttackMethod) -> Self {
        AttackConfig {
            method,
            eps: 0.1,
            steps: default_steps(),
            step_size: None,
            momentum_decay: default_momentum(),
            jsma_theta: default_jsma_theta(),
            jsma_gamma: default_jsma_gamma(),
            cw_c: default_cw_c(),
            cw_kappa: 0.0,
            ead_beta: default_ead_beta(),
            opt_lr: default_opt_lr(),
            opt_steps: default_opt_steps(),
            targeted: false,
            target_label: None,
            victim: default_victim(),
            pgd_init_scale: default_pgd_init_scale(),
        }
    }

    /// Validates the fields the chosen method actually reads.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        match self.method {
            AttackMethod::Fgsm | AttackMethod::Bim | AttackMethod::Pgd | AttackMethod::Mim => {
                if !(self.eps >= 0.0) {
                    return fail(format!("eps must be >= 0, got {}", self.eps));
                }
                if self.steps < 1 {
                    return fail("steps must be >= 1".into());
                }
                if let Some(s) = self.step_size {
                    if !(s >= 0.0) {
                        return fail(format!("step_size must be >= 0, got {s}"));
                    }
                }
                if !(self.momentum_decay >= 0.0) {
                    return fail(format!(
                        "momentum_decay must be >= 0, got {}",
                        self.momentum_decay
                    ));
                }
                if !(self.pgd_init_scale >= 0.0) {
                    return fail(format!(
                        "pgd_init_scale must be >= 0, got {}",
                        self.pgd_init_scale
                    ));
                }
            }
            AttackMethod::Jsma => {
                if !(self.jsma_gamma > 0.0 && self.jsma_gamma <= 1.0) {
                    return fail(format!(
                        "jsma_gamma must lie in (0, 1], got {}",
                        self.jsma_gamma
                    ));
                }
                if self.jsma_theta == 0.0 || !self.jsma_theta.is_finite() {
                    return fail(format!(
                        "jsma_theta must be a nonzero finite step, got {}",
                        self.jsma_theta
                    ));
                }
            }
            AttackMethod::Cw | AttackMethod::Ead => {
                if !(self.cw_c > 0.0) {
                    return fail(format!("cw_c must be > 0, got {}", self.cw_c));
                }
                if !(self.cw_kappa >= 0.0) {
                    return fail(format!("cw_kappa must be >= 0, got {}", self.cw_kappa));
                }
                if !(self.opt_lr > 0.0) {
                    return fail(format!("opt_lr must be > 0, got {}", self.opt_lr));
                }
                if self.opt_steps < 1 {
                    return fail("opt_steps must be >= 1".into());
                }
                if self.method == AttackMethod::Ead && !(self.ead_beta >= 0.0) {
                    return fail(format!("ead_beta must be >= 0, got {}", self.ead_beta));
                }
            }
        }
        if self.targeted && self.target_label.is_none() {
            return fail("targeted mode needs target_label".into());
        }
        Ok(())
    }

    fn effective_step(&self) -> f64 {
        self.step_size.unwrap_or(self.eps / self.steps as f64)
    }
}

/// Crafted adversarial examples with bookkeeping.
#[derive(Debug, Clone)]
pub struct AdvBatch {
    /// The unmodified inputs.
    pub originals: Tensor,
    /// The crafted inputs, row-aligned with `originals`.
    pub adversarials: Tensor,
    /// True labels.
    pub labels: Vec<usize>,
    /// Per-example attack success: the victim misclassifies (untargeted)
    /// or predicts the target (targeted).
    pub success: Vec<bool>,
    /// Per-example L-infinity distortion.
    pub linf: Vec<f64>,
    /// Per-example L2 distortion.
    pub l2: Vec<f64>,
    /// Who was attacked.
    pub victim: Victim,
    /// Total objective per optimizer step, recorded by cw/ead only.
    pub objective_trace: Vec<f64>,
}

/// Sign with a genuine zero: `sgn(0) = 0`, unlike `f64::signum`.
fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps `candidate` into the intersection of the eps-ball around `x` and
/// the unit box, elementwise. Idempotent.
pub fn clip_ball(x: &[f64], candidate: &[f64], eps: f64) -> Vec<f64> {
    x.iter()
        .zip(candidate)
        .map(|(&orig, &cand)| cand.max((orig - eps).max(0.0)).min((orig + eps).min(1.0)))
        .collect()
}

fn victim_probs(ens: &Ensemble, victim: Victim, x: &Tensor) -> Result<Tensor> {
    match victim {
        Victim::Ensemble => ens.predict_ensemble(x),
        Victim::Member(k) => ens.predict_member(k, x),
    }
}

fn stage_victim_probs(
    ens: &Ensemble,
    victim: Victim,
    graph: &mut Graph,
    x: Var,
) -> Result<Var> {
    match victim {
        Victim::Ensemble => {
            let mut acc: Option<Var> = None;
            for k in 0..ens.len() {
                let vars: MemberVars = ens.stage_member(graph, k, false);
                let p = ens.forward_probs(graph, &vars, x)?;
                acc = Some(match acc {
                    Some(sum) => graph.add(sum, p)?,
                    None => p,
                });
            }
            Ok(graph.scale(acc.expect("ensemble non-empty"), 1.0 / ens.len() as f64))
        }
        Victim::Member(k) => {
            if k >= ens.len() {
                return Err(Error::InvalidArgument(format!(
                    "no member {k} in ensemble of {}",
                    ens.len()
                )));
            }
            let vars = ens.stage_member(graph, k, false);
            ens.forward_probs(graph, &vars, x)
        }
    }
}

/// Victim "logits": a member's scaled pre-softmax output, or the log of
/// the averaged probabilities (offset to stay finite) for the ensemble,
/// which has no single pre-softmax vector.
fn stage_victim_logits(
    ens: &Ensemble,
    victim: Victim,
    graph: &mut Graph,
    x: Var,
) -> Result<Var> {
    match victim {
        Victim::Ensemble => {
            let probs = stage_victim_probs(ens, victim, graph, x)?;
            let n = graph.value(probs).rows();
            let l = graph.value(probs).cols();
            let offset = graph.constant(Tensor::filled(n, l, ENSEMBLE_LOGIT_OFFSET));
            let shifted = graph.add(probs, offset)?;
            Ok(graph.ln(shifted))
        }
        Victim::Member(k) => {
            if k >= ens.len() {
                return Err(Error::InvalidArgument(format!(
                    "no member {k} in ensemble of {}",
                    ens.len()
                )));
            }
            let vars = ens.stage_member(graph, k, false);
            ens.forward_logits(graph, &vars, x)
        }
    }
}

fn check_targets(y: &[usize], targets: Option<&[usize]>, classes: usize) -> Result<()> {
    if let Some(t) = targets {
        if t.len() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "attack targets",
                details: format!("{} targets for {} labels", t.len(), y.len()),
            });
        }
        for (i, (&ti, &yi)) in t.iter().zip(y).enumerate() {
            if ti >= classes {
                return Err(Error::LabelOutOfRange {
                    label: ti,
                    classes,
                });
            }
            if ti == yi {
                return Err(Error::InvalidArgument(format!(
                    "example {i}: target class equals the true label {yi}"
                )));
            }
        }
    }
    Ok(())
}

/// Cross-entropy adversarial loss and its input gradient.
///
/// Untargeted mode returns the loss toward the true labels (callers ascend
/// it); targeted mode the loss toward the targets (callers descend it).
/// The scalar is the batch sum, so each gradient row belongs entirely to
/// its example.
pub fn adversarial_loss(
    ens: &Ensemble,
    victim: Victim,
    x: &Tensor,
    y: &[usize],
    targets: Option<&[usize]>,
) -> Result<(f64, Tensor)> {
    check_targets(y, targets, ens.config().num_classes)?;
    let mut graph = Graph::new();
    let xv = graph.leaf(x.clone(), true);
    let probs = stage_victim_probs(ens, victim, &mut graph, xv)?;
    let labels = targets.unwrap_or(y);
    let py = graph.select_cols(probs, labels)?;
    let lp = graph.ln(py);
    let s = graph.sum_all(lp);
    let loss = graph.scale(s, -1.0);
    let value = graph.value(loss).scalar_value()?;
    let grads = graph.backward(loss)?;
    let gx = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
    Ok((value, gx))
}

fn assemble_batch(
    ens: &Ensemble,
    victim: Victim,
    originals: &Tensor,
    adversarials: Tensor,
    y: &[usize],
    targets: Option<&[usize]>,
    objective_trace: Vec<f64>,
) -> Result<AdvBatch> {
    let probs = victim_probs(ens, victim, &adversarials)?;
    let n = originals.rows();
    let mut success = Vec::with_capacity(n);
    let mut linf = Vec::with_capacity(n);
    let mut l2 = Vec::with_capacity(n);
    for i in 0..n {
        let predicted = argmax(probs.row_slice(i));
        success.push(match targets {
            Some(t) => predicted == t[i],
            None => predicted != y[i],
        });
        let mut worst = 0.0f64;
        let mut sq = 0.0;
        for (a, b) in originals.row_slice(i).iter().zip(adversarials.row_slice(i)) {
            let d = (a - b).abs();
            worst = worst.max(d);
            sq += d * d;
        }
        linf.push(worst);
        l2.push(sq.sqrt());
    }
    Ok(AdvBatch {
        originals: originals.clone(),
        adversarials,
        labels: y.to_vec(),
        success,
        linf,
        l2,
        victim,
        objective_trace,
    })
}

fn check_inputs(ens: &Ensemble, x: &Tensor, y: &[usize]) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::Empty("attack batch"));
    }
    if y.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "attack batch",
            details: format!("{} labels for {} examples", y.len(), x.rows()),
        });
    }
    let classes = ens.config().num_classes;
    if let Some(&bad) = y.iter().find(|&&v| v >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    for &v in x.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Numeric(format!(
                "attack input {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Shared engine for the signed-gradient family: momentum-accumulated,
/// L1-normalized gradient signs with a ball clip after every step.
fn signed_iterations(
    ens: &Ensemble,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    init: Tensor,
    steps: usize,
    step_size: f64,
    momentum: f64,
) -> Result<Tensor> {
    let targets_owned = resolve_targets(cfg, y)?;
    let targets = targets_owned.as_deref();
    let (n, d) = (x.rows(), x.cols());
    let mut current = init;
    let mut accumulator = Tensor::zeros(n, d);
    let direction = if cfg.targeted { -1.0 } else { 1.0 };
    for _ in 0..steps {
        let (_, grad) = adversarial_loss(ens, cfg.victim, &current, y, targets)?;
        for i in 0..n {
            let grow = grad.row_slice(i).to_vec();
            let l1: f64 = grow.iter().map(|v| v.abs()).sum();
            let inv = 1.0 / l1.max(1e-12);
            let arow = &mut accumulator.data_mut()[i * d..(i + 1) * d];
            for (a, g) in arow.iter_mut().zip(&grow) {
                *a = momentum * *a + g * inv;
            }
            let step_row: Vec<f64> = current
                .row_slice(i)
                .iter()
                .zip(arow.iter())
                .map(|(&c, &a)| c + direction * step_size * sgn(a))
                .collect();
            let clipped = clip_ball(x.row_slice(i), &step_row, cfg.eps);
            current.data_mut()[i * d..(i + 1) * d].copy_from_slice(&clipped);
        }
    }
    Ok(current)
}

fn resolve_targets(cfg: &AttackConfig, y: &[usize]) -> Result<Option<Vec<usize>>> {
    if !cfg.targeted {
        return Ok(None);
    }
    let t = cfg
        .target_label
        .ok_or_else(|| Error::InvalidArgument("targeted mode needs target_label".into()))?;
    Ok(Some(vec![t; y.len()]))
}

/// Single signed-gradient step of size eps.
pub fn fgsm(ens: &Ensemble, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    cfg.validate()?;
    check_inputs(ens, x, y)?;
    let adv = signed_iterations(ens, x, y, cfg, x.clone(), 1, cfg.eps, 0.0)?;
    let targets = resolve_targets(cfg, y)?;
    assemble_batch(ens, cfg.victim, x, adv, y, targets.as_deref(), Vec::new())
}

/// Iterated signed-gradient steps of size `eps / steps`, clipped to the
/// ball after each one.
pub fn bim(ens: &Ensemble, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    cfg.validate()?;
    check_inputs(ens, x, y)?;
    let adv = signed_iterations(
        ens,
        x,
        y,
        cfg,
        x.clone(),
        cfg.steps,
        cfg.effective_step(),
        0.0,
    )?;
    let targets = resolve_targets(cfg, y)?;
    assemble_batch(ens, cfg.victim, x, adv, y, targets.as_deref(), Vec::new())
}

/// bim from a uniformly drawn start inside the ball. The start for example
/// `i` is a pure function of `(seed, index_offset + i)`, so partitioning a
/// dataset across workers cannot change any result.
pub fn pgd(
    ens: &Ensemble,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    seed: u64,
    index_offset: u64,
) -> Result<AdvBatch> {
    cfg.validate()?;
    check_inputs(ens, x, y)?;
    let (n, d) = (x.rows(), x.cols());
    let mut init = x.clone();
    for i in 0..n {
        let mut r = rng::stream(seed, "pgd-init", index_offset + i as u64);
        let noisy: Vec<f64> = x
            .row_slice(i)
            .iter()
            .map(|&v| v + cfg.pgd_init_scale * rng::uniform(&mut r, -cfg.eps, cfg.eps))
            .collect();
        let clipped = clip_ball(x.row_slice(i), &noisy, cfg.eps);
        init.data_mut()[i * d..(i + 1) * d].copy_from_slice(&clipped);
    }
    let adv = signed_iterations(ens, x, y, cfg, init, cfg.steps, cfg.effective_step(), 0.0)?;
    let targets = resolve_targets(cfg, y)?;
    assemble_batch(ens, cfg.victim, x, adv, y, targets.as_deref(), Vec::new())
}

/// bim with an L1-normalized momentum accumulator on the gradient.
pub fn mim(ens: &Ensemble, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    cfg.validate()?;
    check_inputs(ens, x, y)?;
    let adv = signed_iterations(
        ens,
        x,
        y,
        cfg,
        x.clone(),
        cfg.steps,
        cfg.effective_step(),
        cfg.momentum_decay,
    )?;
    let targets = resolve_targets(cfg, y)?;
    assemble_batch(ens, cfg.victim, x, adv, y, targets.as_deref(), Vec::new())
}

/// Jacobian of the victim probabilities at `x` (single example `[1, d]`),
/// split into the attacked-class row and the summed remainder.
fn saliency_gradients(
    ens: &Ensemble,
    victim: Victim,
    x: &Tensor,
    attacked: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    // First pass: d F_t / d x.
    let mut graph = Graph::new();
    let xv = graph.leaf(x.clone(), true);
    let probs = stage_victim_probs(ens, victim, &mut graph, xv)?;
    let ft = graph.select_cols(probs, &[attacked])?;
    let ft_scalar = graph.sum_all(ft);
    let d_target = graph
        .backward(ft_scalar)?
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(1, x.cols()))
        .data()
        .to_vec();
    // Second pass: d (sum_{j != t} F_j) / d x.
    let rest = graph.remove_col(probs, attacked)?;
    let rest_sum = graph.sum_all(rest);
    let d_rest = graph
        .backward(rest_sum)?
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(1, x.cols()))
        .data()
        .to_vec();
    Ok((d_target, d_rest))
}

/// Greedy saliency attack: per iteration, perturb the single not-yet-used
/// feature whose saliency toward the attacked class is largest, by
/// `jsma_theta`, clamped to the unit box; at most `ceil(gamma * d)`
/// features ever change.
pub fn jsma(ens: &Ensemble, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    cfg.validate()?;
    check_inputs(ens, x, y)?;
    let targets_owned = resolve_targets(cfg, y)?;
    check_targets(y, targets_owned.as_deref(), ens.config().num_classes)?;
    let (n, d) = (x.rows(), x.cols());
    let budget = (cfg.jsma_gamma * d as f64).ceil() as usize;
    let mut adv = x.clone();
    for i in 0..n {
        let row = Tensor::row(x.row_slice(i).to_vec());
        // The class whose probability the attack pushes up: the target, or
        // the runner-up of the victim's clean prediction.
        let attacked = match &targets_owned {
            Some(t) => t[i],
            None => {
                let p = victim_probs(ens, cfg.victim, &row)?;
                let mut best = usize::MAX;
                for j in 0..p.cols() {
                    if j != y[i] && (best == usize::MAX || p.at(0, j) > p.at(0, best)) {
                        best = j;
                    }
                }
                best
            }
        };
        let mut current = row;
        let mut used = vec![false; d];
        for _ in 0..budget {
            let p = victim_probs(ens, cfg.victim, &current)?;
            let predicted = argmax(p.row_slice(0));
            let done = match &targets_owned {
                Some(t) => predicted == t[i],
                None => predicted != y[i],
            };
            if done {
                break;
            }
            let (d_target, d_rest) = saliency_gradients(ens, cfg.victim, &current, attacked)?;
            let mut best_feature = None;
            let mut best_score = 0.0;
            for f in 0..d {
                if used[f] || d_target[f] < 0.0 || d_rest[f] > 0.0 {
                    continue;
                }
                let score = d_target[f] * d_rest[f].abs();
                if score > best_score {
                    best_score = score;
                    best_feature = Some(f);
                }
            }
            let Some(f) = best_feature else {
                break; // saliency all zero: stop early, likely unsuccessful
            };
            let v = (current.at(0, f) + cfg.jsma_theta).clamp(0.0, 1.0);
            current.set(0, f, v);
            used[f] = true;
        }
        adv.data_mut()[i * d..(i + 1) * d].copy_from_slice(current.row_slice(0));
    }
    assemble_batch(
        ens,
        cfg.victim,
        x,
        adv,
        y,
        targets_owned.as_deref(),
        Vec::new(),
    )
}

/// The cw margin at class `a`: `max_{i != a} Z_i - Z_a`, floored at
/// `-kappa`. Minimizing it drives class `a` to the top (targeted use);
/// untargeted attacks minimize the margin with roles reversed.
pub fn cw_margin(z: &[f64], class: usize, kappa: f64) -> f64 {
    let mut best_other = f64::NEG_INFINITY;
    for (i, &v) in z.iter().enumerate() {
        if i != class {
            best_other = best_other.max(v);
        }
    }
    (best_other - z[class]).max(-kappa)
}

struct CwOutcome {
    best: Tensor,
    trace: Vec<f64>,
}

/// Shared cw/ead optimizer: Adam in tanh space over the smooth objective
/// `||x* - x||^2 + c * margin`, with an optional iterative
/// shrinkage-threshold step in input space for the L1 term. Tracks the
/// best iterate per example by total objective (L1 term included).
fn optimize_tanh_space(
    ens: &Ensemble,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    l1_beta: f64,
) -> Result<CwOutcome> {
    let targets_owned = resolve_targets(cfg, y)?;
    let targets = targets_owned.as_deref();
    check_targets(y, targets, ens.config().num_classes)?;
    let (n, d) = (x.rows(), x.cols());

    // tanh-space start at (a clamped copy of) the original.
    let mut w = Tensor::zeros(n, d);
    for (slot, &v) in w.data_mut().iter_mut().zip(x.data()) {
        let clamped = v.clamp(ATANH_MARGIN, 1.0 - ATANH_MARGIN);
        *slot = (2.0 * clamped - 1.0).atanh();
    }

    let mut adam_m = vec![0.0; n * d];
    let mut adam_v = vec![0.0; n * d];
    let mut best = x.clone();
    let mut best_obj = vec![f64::INFINITY; n];
    let mut trace = Vec::with_capacity(cfg.opt_steps);
    let shrink_threshold = l1_beta * cfg.opt_lr;

    for step in 0..cfg.opt_steps {
        let mut graph = Graph::new();
        let wv = graph.leaf(w.clone(), true);
        let th = graph.tanh(wv);
        let ones = graph.constant(Tensor::filled(n, d, 1.0));
        let shifted = graph.add(th, ones)?;
        let xstar = graph.scale(shifted, 0.5);
        let xc = graph.constant(x.clone());
        let delta = graph.sub(xstar, xc)?;
        let sq = graph.mul(delta, delta)?;
        let dist = graph.sum_cols(sq); // [n, 1]

        let z = stage_victim_logits(ens, cfg.victim, &mut graph, xstar)?;
        let zval = graph.value(z).clone();
        // Pick the active margin branch per example on the host; the graph
        // then differentiates exactly that branch.
        let mut attacked_idx = Vec::with_capacity(n);
        let mut other_idx = Vec::with_capacity(n);
        let mut mask = Tensor::zeros(n, 1);
        let mut floor = Tensor::zeros(n, 1);
        for i in 0..n {
            let zrow = zval.row_slice(i);
            let a = match targets {
                Some(t) => t[i],
                None => y[i],
            };
            let mut o = usize::MAX;
            for j in 0..zrow.len() {
                if j != a && (o == usize::MAX || zrow[j] > zrow[o]) {
                    o = j;
                }
            }
            attacked_idx.push(a);
            other_idx.push(o);
            let raw = if cfg.targeted {
                zrow[o] - zrow[a] // push the target to the top
            } else {
                zrow[a] - zrow[o] // push the true class off the top
            };
            if raw > -cfg.cw_kappa {
                mask.set(i, 0, 1.0);
            } else {
                floor.set(i, 0, -cfg.cw_kappa);
            }
        }
        let za = graph.select_cols(z, &attacked_idx)?;
        let zo = graph.select_cols(z, &other_idx)?;
        let raw = if cfg.targeted {
            graph.sub(zo, za)?
        } else {
            graph.sub(za, zo)?
        };
        let mask_v = graph.constant(mask);
        let floor_v = graph.constant(floor);
        let active = graph.mul(raw, mask_v)?;
        let margin = graph.add(active, floor_v)?;
        let weighted = graph.scale(margin, cfg.cw_c);
        let objective = graph.add(dist, weighted)?; // [n, 1] smooth objective

        // Best-iterate tracking and the trace both use the total objective
        // including the L1 term (zero for cw).
        let xstar_val = graph.value(xstar).clone();
        let mut step_total = 0.0;
        for i in 0..n {
            let mut obj_i = graph.value(objective).at(i, 0);
            if l1_beta > 0.0 {
                let l1: f64 = xstar_val
                    .row_slice(i)
                    .iter()
                    .zip(x.row_slice(i))
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                obj_i += l1_beta * l1;
            }
            step_total += obj_i;
            if obj_i < best_obj[i] {
                best_obj[i] = obj_i;
                best.data_mut()[i * d..(i + 1) * d].copy_from_slice(xstar_val.row_slice(i));
            }
        }
        trace.push(step_total);

        let loss = graph.sum_all(objective);
        let grads = graph.backward(loss)?;
        let gw = grads
            .get(wv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(n, d));

        // Adam update on w.
        let t = (step + 1) as f64;
        let (b1, b2, eps_adam): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for (idx, slot) in w.data_mut().iter_mut().enumerate() {
            let g = gw.data()[idx];
            adam_m[idx] = b1 * adam_m[idx] + (1.0 - b1) * g;
            adam_v[idx] = b2 * adam_v[idx] + (1.0 - b2) * g * g;
            let mh = adam_m[idx] / bc1;
            let vh = adam_v[idx] / bc2;
            *slot -= cfg.opt_lr * mh / (vh.sqrt() + eps_adam);
        }

        // Iterative shrinkage for the L1 term, in input space.
        if l1_beta > 0.0 {
            for (idx, slot) in w.data_mut().iter_mut().enumerate() {
                let xs = 0.5 * (slot.tanh() + 1.0);
                let orig = x.data()[idx];
                let residual = xs - orig;
                let shrunk = sgn(residual) * (residual.abs() - shrink_threshold).max(0.0);
                let remapped = (orig + shrunk).clamp(ATANH_MARGIN, 1.0 - ATANH_MARGIN);
                *slot = (2.0 * remapped - 1.0).atanh();
            }
        }
    }
    Ok(CwOutcome { best, trace })
}

/// Tanh-space optimizer attack minimizing squared L2 distortion plus a
/// weighted classification margin.
pub fn cw(ens: &Ensemble, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    cfg.validate()?;
    check_inputs(ens, x, y)?;
    let outcome = optimize_tanh_space(ens, x, y, cfg, 0.0)?;
    let targets = resolve_targets(cfg, y)?;
    assemble_batch(
        ens,
        cfg.victim,
        x,
        outcome.best,
        y,
        targets.as_deref(),
        outcome.trace,
    )
}

/// cw with an extra L1 penalty handled by iterative shrinkage; with
/// `ead_beta = 0` the shrinkage is skipped and the run is identical to cw.
pub fn ead(ens: &Ensemble, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    cfg.validate()?;
    check_inputs(ens, x, y)?;
    let outcome = optimize_tanh_space(ens, x, y, cfg, cfg.ead_beta)?;
    let targets = resolve_targets(cfg, y)?;
    assemble_batch(
        ens,
        cfg.victim,
        x,
        outcome.best,
        y,
        targets.as_deref(),
        outcome.trace,
    )
}

/// Runs whichever attack `cfg` names. `seed`/`index_offset` feed pgd's
/// per-example starts and are ignored by the deterministic methods.
pub fn run_attack(
    ens: &Ensemble,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    seed: u64,
    index_offset: u64,
) -> Result<AdvBatch> {
    match cfg.method {
        AttackMethod::Fgsm => fgsm(ens, x, y, cfg),
        AttackMethod::Bim => bim(ens, x, y, cfg),
        AttackMethod::Pgd => pgd(ens, x, y, cfg, seed, index_offset),
        AttackMethod::Mim => mim(ens, x, y, cfg),
        AttackMethod::Jsma => jsma(ens, x, y, cfg),
        AttackMethod::Cw => cw(ens, x, y, cfg),
        AttackMethod::Ead => ead(ens, x, y, cfg),
    }
}
