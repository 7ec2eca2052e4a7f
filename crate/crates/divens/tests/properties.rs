//! Randomized invariants: algebraic facts the library promises for *every*
//! valid input, checked here under fuzzed shapes and values rather than the
//! hand-picked cases the unit tests pin down. Each block names the invariant
//! it would falsify.

use divens::attacks::clip_ball;
use divens::diversity::{
    adp_regularizer, ensemble_diversity, jsd_diversity, nonmax_matrix, project_to_simplex,
    shannon_entropy, solve_alpha, solve_confidence, AdpConfig, PredictionSet, DET_OFFSET,
};
use divens::evaluation::roc_auc;
use divens::tape::Graph;
use divens::tensor::Tensor;
use proptest::prelude::*;

/// A random `(members, label)` pair with `K <= L-1` so the Gram matrix is
/// structurally full-rank: raw positive draws normalized onto the simplex.
fn prediction_set() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (2usize..=5)
        .prop_flat_map(|k| (Just(k), (k + 1).max(3)..=12usize))
        .prop_flat_map(|(k, l)| {
            (
                proptest::collection::vec(proptest::collection::vec(1e-3..1.0f64, l), k),
                0..l,
            )
        })
        .prop_map(|(raw, y)| {
            let preds: Vec<Vec<f64>> = raw
                .into_iter()
                .map(|row| {
                    let total: f64 = row.iter().sum();
                    row.into_iter().map(|v| v / total).collect()
                })
                .collect();
            (preds, y)
        })
}

/// Ensemble diversity of `(preds, y)` with the default determinant offset.
fn diversity_of(preds: Vec<Vec<f64>>, y: usize) -> f64 {
    let set = PredictionSet::new(preds, y).unwrap();
    ensemble_diversity(&nonmax_matrix(&set).unwrap(), DET_OFFSET).unwrap()
}

/// AUC as the probability that a random adversarial score sits below a
/// random clean score, counting ties one half — the O(n*m) estimator.
fn pairwise_auc(clean: &[f64], adv: &[f64]) -> f64 {
    let mut total = 0.0;
    for &c in clean {
        for &a in adv {
            if a < c {
                total += 1.0;
            } else if a == c {
                total += 0.5;
            }
        }
    }
    total / (clean.len() * adv.len()) as f64
}

proptest! {
    /// Unit columns keep the Gram determinant inside the Hadamard bound:
    /// `0 <= ED <= 1` up to the determinant offset.
    #[test]
    fn diversity_respects_the_hadamard_bound((preds, y) in prediction_set()) {
        let k = preds.len();
        let ed = diversity_of(preds, y);
        prop_assert!(ed >= 0.0, "diversity {ed} below zero");
        prop_assert!(
            ed <= 1.0 + 2.0 * k as f64 * DET_OFFSET,
            "diversity {ed} above the Hadamard bound"
        );
    }

    /// Reordering ensemble members permutes Gram rows and columns together,
    /// which cannot move the determinant.
    #[test]
    fn diversity_ignores_member_order(
        (preds, y) in prediction_set(),
        seed in any::<u64>(),
    ) {
        let baseline = diversity_of(preds.clone(), y);
        let mut order: Vec<usize> = (0..preds.len()).collect();
        let mut state = seed;
        for i in (1..order.len()).rev() {
            // Tiny deterministic LCG shuffle driven by the fuzzed seed.
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state >> 33) as usize % (i + 1));
        }
        let shuffled: Vec<Vec<f64>> = order.iter().map(|&i| preds[i].clone()).collect();
        let permuted = diversity_of(shuffled, y);
        prop_assert!(
            (baseline - permuted).abs() <= 1e-9 * baseline.abs().max(1.0),
            "member order moved diversity: {baseline} vs {permuted}"
        );
    }

    /// Relabeling the non-maximal classes permutes Gram-factor rows, which
    /// cannot move the determinant either.
    #[test]
    fn diversity_ignores_nonmax_class_labels(
        (preds, y) in prediction_set(),
        seed in any::<u64>(),
    ) {
        let l = preds[0].len();
        let baseline = diversity_of(preds.clone(), y);
        let mut slots: Vec<usize> = (0..l).filter(|&j| j != y).collect();
        let mut state = seed;
        for i in (1..slots.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            slots.swap(i, (state >> 33) as usize % (i + 1));
        }
        let originals: Vec<usize> = (0..l).filter(|&j| j != y).collect();
        let relabeled: Vec<Vec<f64>> = preds
            .iter()
            .map(|p| {
                let mut q = p.clone();
                for (&from, &to) in originals.iter().zip(&slots) {
                    q[to] = p[from];
                }
                q
            })
            .collect();
        let permuted = diversity_of(relabeled, y);
        prop_assert!(
            (baseline - permuted).abs() <= 1e-9 * baseline.abs().max(1.0),
            "class relabeling moved diversity: {baseline} vs {permuted}"
        );
    }

    /// The regularizer averages members for the entropy term and takes a
    /// determinant for the diversity term; neither sees member order.
    #[test]
    fn regularizer_ignores_member_order((preds, y) in prediction_set()) {
        let cfg = AdpConfig::new(2.0, 0.5).unwrap();
        let forward = adp_regularizer(&PredictionSet::new(preds.clone(), y).unwrap(), &cfg).unwrap();
        let reversed: Vec<Vec<f64>> = preds.into_iter().rev().collect();
        let backward = adp_regularizer(&PredictionSet::new(reversed, y).unwrap(), &cfg).unwrap();
        prop_assert!(
            (forward - backward).abs() <= 1e-9 * forward.abs().max(1.0),
            "member order moved the regularizer: {forward} vs {backward}"
        );
    }

    /// Jensen-Shannon divergence is non-negative everywhere and exactly
    /// zero when every member agrees.
    #[test]
    fn jsd_is_nonnegative_and_vanishes_on_agreement((preds, y) in prediction_set()) {
        let spread = jsd_diversity(&PredictionSet::new(preds.clone(), y).unwrap()).unwrap();
        prop_assert!(spread >= -1e-12, "jsd {spread} negative");
        let copies = vec![preds[0].clone(); preds.len()];
        let agreed = jsd_diversity(&PredictionSet::new(copies, y).unwrap()).unwrap();
        prop_assert!(agreed.abs() <= 1e-9, "jsd of identical members {agreed}");
    }

    /// Entropy of a distribution over `L` outcomes lives in `[0, ln L]`.
    #[test]
    fn entropy_is_bounded_by_log_cardinality(raw in proptest::collection::vec(1e-6..1.0f64, 2..=16)) {
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let h = shannon_entropy(&p).unwrap();
        prop_assert!(h >= 0.0, "entropy {h} negative");
        prop_assert!(h <= (p.len() as f64).ln() + 1e-9, "entropy {h} above ln L");
    }

    /// The coefficient solver and the confidence solver are inverses: alpha
    /// from a target confidence recovers that confidence.
    #[test]
    fn alpha_and_confidence_solvers_round_trip(
        k in 2usize..=10,
        l in 3usize..=1000,
        t in 1e-3..1.0f64,
    ) {
        // Map t onto the open interval (1/L, 1) the solver accepts.
        let lo = 1.0 / l as f64;
        let f = lo + (0.999 - lo) * t.clamp(1e-3, 0.999);
        let alpha = solve_alpha(k, l, f).unwrap();
        let back = solve_confidence(k, l, alpha).unwrap();
        prop_assert!(
            (back - f).abs() < 1e-6,
            "round-trip drifted: {f} -> alpha {alpha} -> {back}"
        );
    }

    /// Simplex projection lands on the simplex, is idempotent, and is never
    /// beaten by a random feasible point in Euclidean distance.
    #[test]
    fn simplex_projection_is_the_nearest_feasible_point(
        v in proptest::collection::vec(-10.0..10.0f64, 1..=12),
        raw in proptest::collection::vec(1e-3..1.0f64, 1..=12),
    ) {
        let mut projected = v.clone();
        project_to_simplex(&mut projected).unwrap();
        let sum: f64 = projected.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9, "projection sums to {sum}");
        prop_assert!(projected.iter().all(|&p| p >= 0.0), "negative coordinate");

        let mut twice = projected.clone();
        project_to_simplex(&mut twice).unwrap();
        let drift = projected
            .iter()
            .zip(&twice)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        prop_assert!(drift <= 1e-12, "projection moved a fixed point by {drift}");

        // A random simplex point of the same dimension must not be closer.
        let total: f64 = raw.iter().take(v.len()).sum();
        let candidate: Vec<f64> = raw.iter().take(v.len()).map(|r| r / total).collect();
        if candidate.len() == v.len() {
            let dist = |p: &[f64]| -> f64 {
                p.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            };
            prop_assert!(
                dist(&projected) <= dist(&candidate) + 1e-9,
                "candidate beat the projection: {} < {}",
                dist(&candidate),
                dist(&projected)
            );
        }
    }

    /// Ball clipping returns a feasible point and acts as the identity on
    /// anything already feasible — clipping twice changes nothing.
    #[test]
    fn ball_clipping_is_feasible_and_idempotent(
        pairs in proptest::collection::vec(((0.0..1.0f64), (-2.0..3.0f64)), 1..=24),
        eps in 1e-4..1.0f64,
    ) {
        let x: Vec<f64> = pairs.iter().map(|(a, _)| *a).collect();
        let candidate: Vec<f64> = pairs.iter().map(|(_, b)| *b).collect();
        let clipped = clip_ball(&x, &candidate, eps);
        for (c, o) in clipped.iter().zip(&x) {
            prop_assert!((0.0..=1.0).contains(c), "clipped value {c} escaped the box");
            prop_assert!((c - o).abs() <= eps + 1e-12, "clipped value {c} escaped the ball");
        }
        let again = clip_ball(&x, &clipped, eps);
        prop_assert!(again == clipped, "second clip moved an already-feasible point");
    }

    /// The trapezoid AUC equals the O(n*m) pairwise estimator, ties counted
    /// one half; scores are quantized so ties actually occur.
    #[test]
    fn roc_auc_matches_the_pairwise_estimator(
        clean_raw in proptest::collection::vec(0u8..=20, 1..=40),
        adv_raw in proptest::collection::vec(0u8..=20, 1..=40),
    ) {
        let clean: Vec<f64> = clean_raw.iter().map(|&v| v as f64 / 20.0).collect();
        let adv: Vec<f64> = adv_raw.iter().map(|&v| v as f64 / 20.0).collect();
        let curve = roc_auc(&clean, &adv).unwrap();
        let oracle = pairwise_auc(&clean, &adv);
        prop_assert!(
            (curve.auc - oracle).abs() < 1e-6,
            "trapezoid {} vs pairwise {}",
            curve.auc,
            oracle
        );
    }

    /// Softmax rows are probability distributions with every entry strictly
    /// inside (0, 1). The logit gap is kept below ~36 — past that the exact
    /// value is within half an ulp of 1.0 and rounds onto the boundary.
    #[test]
    fn softmax_rows_are_distributions(
        logits in proptest::collection::vec(-18.0..18.0f64, 2..=12),
    ) {
        let mut graph = Graph::new();
        let z = graph.constant(Tensor::new(1, logits.len(), logits).unwrap());
        let p = graph.softmax(z);
        let row = graph.value(p).data();
        let sum: f64 = row.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9, "softmax row sums to {sum}");
        prop_assert!(
            row.iter().all(|&v| v > 0.0 && v < 1.0),
            "softmax entry escaped (0, 1)"
        );
    }
}
