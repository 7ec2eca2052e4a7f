//! Accuracy, robustness, transferability, detection, and diversity
//! summaries over a frozen ensemble.
//!
//! Everything here is read-only: evaluation never mutates the model, and
//! every function is a pure map from `(ensemble, data, seed)` to numbers.

use crate::attacks::{run_attack, AttackConfig, Victim};
use crate::data::Dataset;
use crate::diversity::{ensemble_diversity, nonmax_matrix, PredictionSet, DET_OFFSET};
use crate::error::{Error, Result};
use crate::model::Ensemble;
use crate::rng;
use crate::tensor::{argmax, pairwise_sum, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Mean of per-member probability tensors, bit-identical to
/// [`Ensemble::predict_ensemble`]'s reduction.
fn mean_probs(per_member: &[Tensor]) -> Result<Tensor> {
    let mut mean = pairwise_sum(per_member)?;
    let inv_k = 1.0 / per_member.len() as f64;
    for v in mean.data_mut() {
        *v *= inv_k;
    }
    Ok(mean)
}

/// What a transfer-matrix entry measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Entry `(i, j)`: member `j`'s accuracy on examples crafted against
    /// member `i` (higher = less transfer).
    UntargetedAccuracy,
    /// Entry `(i, j)`: rate at which member `j` predicts the attacker's
    /// target class (higher = more transfer).
    TargetedSuccessRate,
}

/// Ensemble and per-member clean accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Accuracy of the averaged prediction.
    pub ensemble: f64,
    /// Accuracy of each member alone.
    pub members: Vec<f64>,
}

/// Member-to-member transfer grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferMatrix {
    /// Row-major `k x k` grid; row = substitute (crafting) member,
    /// column = evaluated member.
    pub values: Vec<f64>,
    /// Member count.
    pub k: usize,
    /// What the entries measure.
    pub mode: TransferMode,
    /// The attack used to craft every row.
    pub attack: AttackConfig,
}

impl TransferMatrix {
    /// Entry for substitute `i`, evaluated member `j`.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k + j]
    }
}

/// ROC sweep for the diversity detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    /// Sweep thresholds, ascending (`-inf` and `+inf` included).
    pub thresholds: Vec<f64>,
    /// False-positive rate at each threshold.
    pub fpr: Vec<f64>,
    /// True-positive rate at each threshold.
    pub tpr: Vec<f64>,
    /// Area under the curve by the trapezoid rule.
    pub auc: f64,
}

/// Binned view of per-example `ln ED`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityHistogram {
    /// `bins + 1` ascending bin edges.
    pub edges: Vec<f64>,
    /// Per-bin example counts; they sum to the dataset size.
    pub counts: Vec<usize>,
    /// Median of the underlying values.
    pub median_ln_ed: f64,
}

/// Clean accuracy of the ensemble and of each member.
pub fn accuracy(ens: &Ensemble, data: &Dataset) -> Result<AccuracyReport> {
    if data.len() == 0 {
        return Err(Error::Empty("accuracy dataset"));
    }
    let n = data.len();
    let mut member_hits = vec![0usize; ens.len()];
    let mut member_probs = Vec::with_capacity(ens.len());
    for k in 0..ens.len() {
        let p = ens.predict_member(k, data.features())?;
        for i in 0..n {
            if argmax(p.row_slice(i)) == data.labels()[i] {
                member_hits[k] += 1;
            }
        }
        member_probs.push(p);
    }
    let mean = mean_probs(&member_probs)?;
    let mut hits = 0usize;
    for i in 0..n {
        if argmax(mean.row_slice(i)) == data.labels()[i] {
            hits += 1;
        }
    }
    Ok(AccuracyReport {
        ensemble: hits as f64 / n as f64,
        members: member_hits
            .into_iter()
            .map(|h| h as f64 / n as f64)
            .collect(),
    })
}

fn ensemble_accuracy_on(ens: &Ensemble, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let probs = ens.predict_ensemble(features)?;
    let hits = (0..features.rows())
        .filter(|&i| argmax(probs.row_slice(i)) == labels[i])
        .count();
    Ok(hits as f64 / features.rows() as f64)
}

/// Ensemble accuracy on examples crafted by `attack` (against whatever
/// victim the config names). `seed` feeds the attack's random start.
pub fn robust_accuracy(
    ens: &Ensemble,
    data: &Dataset,
    attack: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    if data.len() == 0 {
        return Err(Error::Empty("robust_accuracy dataset"));
    }
    let adv = run_attack(ens, data.features(), data.labels(), attack, seed, 0)?;
    ensemble_accuracy_on(ens, &adv.adversarials, data.labels())
}

/// Draws a target class distinct from `y` for example `index`.
fn transfer_target(seed: u64, index: u64, y: usize, classes: usize) -> usize {
    let mut r = rng::stream(seed, "transfer-target", index);
    let draw = r.random_range(0..classes - 1);
    if draw >= y {
        draw + 1
    } else {
        draw
    }
}

/// The member-to-member transfer grid: entry `(i, j)` crafts against
/// member `i` and measures member `j`.
///
/// Targeted mode draws a per-example target class (never the true label)
/// from the `(seed, example index)` stream, then attacks the examples
/// grouped by target so partitioning cannot change any craft.
pub fn transfer_matrix(
    ens: &Ensemble,
    data: &Dataset,
    attack: &AttackConfig,
    mode: TransferMode,
    seed: u64,
) -> Result<TransferMatrix> {
    let k = ens.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "transfer_matrix needs at least 2 members, got {k}"
        )));
    }
    if data.len() == 0 {
        return Err(Error::Empty("transfer_matrix dataset"));
    }
    let n = data.len();
    let classes = ens.config().num_classes;
    let targets: Option<Vec<usize>> = match mode {
        TransferMode::UntargetedAccuracy => None,
        TransferMode::TargetedSuccessRate => Some(
            (0..n)
                .map(|i| transfer_target(seed, i as u64, data.labels()[i], classes))
                .collect(),
        ),
    };

    let mut values = vec![0.0; k * k];
    for i in 0..k {
        let mut cfg = attack.clone();
        cfg.victim = Victim::Member(i);
        // Craft the full batch against member i, grouping by target class
        // in targeted mode (the config carries one shared target).
        let mut adversarials = data.features().clone();
        match &targets {
            None => {
                cfg.targeted = false;
                cfg.target_label = None;
                let adv = run_attack(ens, data.features(), data.labels(), &cfg, seed, 0)?;
                adversarials = adv.adversarials;
            }
            Some(t) => {
                cfg.targeted = true;
                for class in 0..classes {
                    let idx: Vec<usize> = (0..n).filter(|&e| t[e] == class).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let sub = data.subset(&idx)?;
                    cfg.target_label = Some(class);
                    // Per-example determinism: offset by the original index.
                    let mut crafted_rows = Vec::with_capacity(idx.len());
                    for (slot, &orig) in idx.iter().enumerate() {
                        let one = sub.subset(&[slot])?;
                        let adv = run_attack(
                            ens,
                            one.features(),
                            one.labels(),
                            &cfg,
                            seed,
                            orig as u64,
                        )?;
                        crafted_rows.push(adv.adversarials);
                    }
                    for (slot, &orig) in idx.iter().enumerate() {
                        let d = data.dim();
                        adversarials.data_mut()[orig * d..(orig + 1) * d]
                            .copy_from_slice(crafted_rows[slot].row_slice(0));
                    }
                }
            }
        }

        for j in 0..k {
            let probs = ens.predict_member(j, &adversarials)?;
            let score = match (&targets, mode) {
                (None, _) => (0..n)
                    .filter(|&e| argmax(probs.row_slice(e)) == data.labels()[e])
                    .count() as f64,
                (Some(t), _) => (0..n)
                    .filter(|&e| argmax(probs.row_slice(e)) == t[e])
                    .count() as f64,
            };
            values[i * k + j] = score / n as f64;
        }
    }
    Ok(TransferMatrix {
        values,
        k,
        mode,
        attack: attack.clone(),
    })
}

/// Per-example `ln ED` with the removed index fixed by the true labels.
pub fn ln_diversity_values(
    ens: &Ensemble,
    features: &Tensor,
    labels: &[usize],
) -> Result<Vec<f64>> {
    if features.rows() == 0 {
        return Err(Error::Empty("diversity dataset"));
    }
    if labels.len() != features.rows() {
        return Err(Error::ShapeMismatch {
            op: "ln_diversity_values",
            details: format!("{} labels for {} rows", labels.len(), features.rows()),
        });
    }
    let per_member: Vec<Tensor> = (0..ens.len())
        .map(|k| ens.predict_member(k, features))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let preds: Vec<Vec<f64>> = per_member.iter().map(|p| p.row_slice(i).to_vec()).collect();
        let set = PredictionSet::new(preds, labels[i])?;
        let nm = nonmax_matrix(&set)?;
        let ed = ensemble_diversity(&nm, DET_OFFSET)?;
        out.push(ed.max(f64::MIN_POSITIVE).ln());
    }
    Ok(out)
}

/// The diversity detection score of one input row: `ED` computed with the
/// removed index set to the ensemble's own prediction (no label is
/// available at test time). Low scores flag adversarial inputs.
pub fn detection_score(ens: &Ensemble, x: &Tensor) -> Result<f64> {
    if x.rows() != 1 {
        return Err(Error::ShapeMismatch {
            op: "detection_score",
            details: format!("expected a single row, got {}", x.rows()),
        });
    }
    Ok(detection_scores(ens, x)?[0])
}

/// [`detection_score`] over every row of `features`.
pub fn detection_scores(ens: &Ensemble, features: &Tensor) -> Result<Vec<f64>> {
    if features.rows() == 0 {
        return Err(Error::Empty("detection batch"));
    }
    let per_member: Vec<Tensor> = (0..ens.len())
        .map(|k| ens.predict_member(k, features))
        .collect::<Result<_>>()?;
    let mean = mean_probs(&per_member)?;
    let mut out = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let y_hat = argmax(mean.row_slice(i));
        let preds: Vec<Vec<f64>> = per_member.iter().map(|p| p.row_slice(i).to_vec()).collect();
        let set = PredictionSet::new(preds, y_hat)?;
        let nm = nonmax_matrix(&set)?;
        out.push(ensemble_diversity(&nm, DET_OFFSET)?);
    }
    Ok(out)
}

/// ROC sweep for "score < threshold means adversarial": thresholds run
/// over every observed score plus the infinite endpoints, and the AUC is
/// the trapezoid area (equivalently, the probability a random adversarial
/// scores below a random clean example, ties counted half).
pub fn roc_auc(clean_scores: &[f64], adv_scores: &[f64]) -> Result<RocCurve> {
    if clean_scores.is_empty() {
        return Err(Error::Empty("clean scores"));
    }
    if adv_scores.is_empty() {
        return Err(Error::Empty("adversarial scores"));
    }
    for &s in clean_scores.iter().chain(adv_scores) {
        if !s.is_finite() {
            return Err(Error::Numeric(format!("non-finite detection score {s}")));
        }
    }
    let mut thresholds: Vec<f64> = Vec::with_capacity(clean_scores.len() + adv_scores.len() + 2);
    thresholds.push(f64::NEG_INFINITY);
    thresholds.extend_from_slice(clean_scores);
    thresholds.extend_from_slice(adv_scores);
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut sorted_clean = clean_scores.to_vec();
    let mut sorted_adv = adv_scores.to_vec();
    sorted_clean.sort_by(f64::total_cmp);
    sorted_adv.sort_by(f64::total_cmp);
    let frac_below = |sorted: &[f64], t: f64| -> f64 {
        // Count of scores strictly below t.
        let below = sorted.partition_point(|&v| v < t);
        below as f64 / sorted.len() as f64
    };

    let mut fpr = Vec::with_capacity(thresholds.len());
    let mut tpr = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        fpr.push(frac_below(&sorted_clean, t));
        tpr.push(frac_below(&sorted_adv, t));
    }
    // +inf must register every score as detected.
    *fpr.last_mut().expect("nonempty") = 1.0;
    *tpr.last_mut().expect("nonempty") = 1.0;

    let mut auc = 0.0;
    for w in 1..thresholds.len() {
        auc += (fpr[w] - fpr[w - 1]) * (tpr[w] + tpr[w - 1]) / 2.0;
    }
    Ok(RocCurve {
        thresholds,
        fpr,
        tpr,
        auc,
    })
}

/// Median of a non-empty slice (mean of the middle pair when even).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Histogram of per-example `ln ED` over `data` (true labels fix the
/// removed index), with `bins` equal-width bins spanning the value range.
pub fn diversity_histogram(
    ens: &Ensemble,
    data: &Dataset,
    bins: usize,
) -> Result<DiversityHistogram> {
    if bins < 1 {
        return Err(Error::InvalidArgument(format!(
            "histogram needs bins >= 1, got {bins}"
        )));
    }
    let values = ln_diversity_values(ens, data.features(), data.labels())?;
    let med = median(&values)?;
    let mut lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|b| lo + width * b as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in &values {
        let mut b = ((v - lo) / width) as usize;
        if b >= bins {
            b = bins - 1; // the maximum lands in the last bin
        }
        counts[b] += 1;
    }
    Ok(DiversityHistogram {
        edges,
        counts,
        median_ln_ed: med,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackMethod;
    use crate::data::synth_blobs;
    use crate::model::{MlpConfig, ModelParams};

    fn zero_ensemble(k: usize, d: usize, l: usize) -> Ensemble {
        let cfg = MlpConfig::with_hidden(d, vec![8], l).unwrap();
        let members = (0..k).map(|_| ModelParams::zeros(&cfg)).collect();
        Ensemble::from_members(cfg, members).unwrap()
    }

    fn random_ensemble(k: usize, d: usize, l: usize, seed: u64) -> Ensemble {
        let cfg = MlpConfig::with_hidden(d, vec![8], l).unwrap();
        Ensemble::init(cfg, k, seed).unwrap()
    }

    #[test]
    fn uniform_predictor_scores_chance_with_lowest_tie_break() {
        // Zero weights give uniform probabilities; argmax ties to class 0.
        let ds = synth_blobs(3, 4, 6, 25, 0.08).unwrap();
        let ens = zero_ensemble(2, 6, 4);
        let report = accuracy(&ens, &ds).unwrap();
        let class0 = ds.labels().iter().filter(|&&y| y == 0).count() as f64;
        let expected = class0 / ds.len() as f64;
        assert_eq!(report.ensemble, expected);
        for m in &report.members {
            assert_eq!(*m, expected);
        }
    }

    #[test]
    fn zero_eps_attack_matches_clean_accuracy_exactly() {
        let ds = synth_blobs(5, 3, 6, 20, 0.08).unwrap();
        let ens = random_ensemble(2, 6, 3, 7);
        let clean = accuracy(&ens, &ds).unwrap().ensemble;
        for method in [AttackMethod::Fgsm, AttackMethod::Pgd] {
            let mut cfg = AttackConfig::new(method);
            cfg.eps = 0.0;
            cfg.steps = 3;
            let robust = robust_accuracy(&ens, &ds, &cfg, 11).unwrap();
            assert_eq!(robust, clean, "{method:?}");
        }
    }

    #[test]
    fn transfer_matrix_of_identical_members_is_constant() {
        let cfg = MlpConfig::with_hidden(6, vec![8], 3).unwrap();
        let one = Ensemble::init(cfg.clone(), 1, 5).unwrap();
        let member = one.members()[0].clone();
        let ens = Ensemble::from_members(cfg, vec![member.clone(), member]).unwrap();
        let ds = synth_blobs(5, 3, 6, 15, 0.08).unwrap();
        let mut atk = AttackConfig::new(AttackMethod::Fgsm);
        atk.eps = 0.1;
        let tm = transfer_matrix(&ens, &ds, &atk, TransferMode::UntargetedAccuracy, 3).unwrap();
        let v = tm.at(0, 0);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(tm.at(i, j), v);
            }
        }
    }

    #[test]
    fn targeted_transfer_entries_are_rates_in_unit_interval() {
        let ens = random_ensemble(2, 6, 3, 9);
        let ds = synth_blobs(6, 3, 6, 10, 0.08).unwrap();
        let mut atk = AttackConfig::new(AttackMethod::Fgsm);
        atk.eps = 0.2;
        let tm = transfer_matrix(&ens, &ds, &atk, TransferMode::TargetedSuccessRate, 4).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let v = tm.at(i, j);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn transfer_targets_never_equal_the_label() {
        for i in 0..200u64 {
            let y = (i % 5) as usize;
            let t = transfer_target(42, i, y, 5);
            assert_ne!(t, y);
            assert!(t < 5);
        }
    }

    #[test]
    fn identical_members_score_zero_diversity() {
        let cfg = MlpConfig::with_hidden(6, vec![8], 4).unwrap();
        let one = Ensemble::init(cfg.clone(), 1, 5).unwrap();
        let member = one.members()[0].clone();
        let ens = Ensemble::from_members(cfg, vec![member.clone(), member]).unwrap();
        let ds = synth_blobs(2, 4, 6, 5, 0.08).unwrap();
        let scores = detection_scores(&ens, ds.features()).unwrap();
        for s in scores {
            // Parallel columns: determinant collapses to the ridge offset.
            assert!(s < 1e-6, "score {s}");
        }
    }

    #[test]
    fn detection_score_bounds_hold() {
        let ens = random_ensemble(3, 6, 4, 13);
        let ds = synth_blobs(7, 4, 6, 10, 0.08).unwrap();
        let scores = detection_scores(&ens, ds.features()).unwrap();
        for s in scores {
            assert!(s >= 0.0 && s <= 1.0 + 3.0 * 1e-12, "score {s}");
        }
    }

    #[test]
    fn roc_perfect_separation_gives_unit_auc() {
        let clean = vec![0.9, 0.8, 0.95];
        let adv = vec![0.1, 0.2, 0.05];
        let roc = roc_auc(&clean, &adv).unwrap();
        assert_eq!(roc.auc, 1.0);
        // Sweep monotonicity.
        for w in 1..roc.thresholds.len() {
            assert!(roc.fpr[w] >= roc.fpr[w - 1]);
            assert!(roc.tpr[w] >= roc.tpr[w - 1]);
        }
    }

    #[test]
    fn roc_identical_distributions_sit_at_chance() {
        let scores = vec![0.5, 0.5, 0.5, 0.5];
        let roc = roc_auc(&scores, &scores).unwrap();
        assert!((roc.auc - 0.5).abs() < 1e-12);
    }

    /// Probability a random adversarial score sits below a random clean
    /// score, ties counted half — the classic pairwise AUC estimator.
    fn pairwise_auc(clean: &[f64], adv: &[f64]) -> f64 {
        let mut total = 0.0;
        for &a in adv {
            for &c in clean {
                total += if a < c {
                    1.0
                } else if a == c {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (clean.len() * adv.len()) as f64
    }

    #[test]
    fn roc_matches_pairwise_oracle_with_ties() {
        let mut r = rng::stream(77, "roc-test", 0);
        // Quantized scores force plenty of ties across the two samples.
        let clean: Vec<f64> = (0..80)
            .map(|_| (rng::uniform(&mut r, 0.0, 1.0) * 8.0).round() / 8.0 + 0.1)
            .collect();
        let adv: Vec<f64> = (0..60)
            .map(|_| (rng::uniform(&mut r, 0.0, 1.0) * 8.0).round() / 8.0)
            .collect();
        let roc = roc_auc(&clean, &adv).unwrap();
        let oracle = pairwise_auc(&clean, &adv);
        assert!(
            (roc.auc - oracle).abs() < 1e-6,
            "trapezoid {} vs pairwise {}",
            roc.auc,
            oracle
        );
    }

    #[test]
    fn median_handles_even_and_odd_lengths() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn histogram_counts_partition_the_dataset() {
        let ens = random_ensemble(2, 6, 3, 31);
        let ds = synth_blobs(8, 3, 6, 12, 0.08).unwrap();
        let hist = diversity_histogram(&ens, &ds, 7).unwrap();
        assert_eq!(hist.counts.iter().sum::<usize>(), ds.len());
        assert_eq!(hist.edges.len(), 8);
        for w in 1..hist.edges.len() {
            assert!(hist.edges[w] > hist.edges[w - 1]);
        }
    }

    #[test]
    fn single_example_histogram_has_one_filled_bin() {
        let ens = random_ensemble(2, 6, 3, 33);
        let ds = synth_blobs(9, 3, 6, 5, 0.08).unwrap();
        let one = ds.subset(&[0]).unwrap();
        let hist = diversity_histogram(&ens, &one, 4).unwrap();
        assert_eq!(hist.counts.iter().sum::<usize>(), 1);
        assert_eq!(hist.counts.iter().filter(|&&c| c > 0).count(), 1);
        let values = ln_diversity_values(&ens, one.features(), one.labels()).unwrap();
        assert_eq!(hist.median_ln_ed, values[0]);
    }

    #[test]
    fn ln_diversity_is_finite_even_for_identical_members() {
        let cfg = MlpConfig::with_hidden(6, vec![8], 4).unwrap();
        let one = Ensemble::init(cfg.clone(), 1, 5).unwrap();
        let member = one.members()[0].clone();
        let ens = Ensemble::from_members(cfg, vec![member.clone(), member]).unwrap();
        let ds = synth_blobs(2, 4, 6, 5, 0.08).unwrap();
        let values = ln_diversity_values(&ens, ds.features(), ds.labels()).unwrap();
        for v in values {
            assert!(v.is_finite());
            assert!(v < -20.0, "parallel members should score tiny ln ED, got {v}");
        }
    }
}
