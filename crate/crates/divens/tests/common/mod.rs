//! Shared fixtures and independent oracles for the integration suites.
//!
//! Training is the expensive part, so every trained ensemble is built at
//! most once per test binary behind a `Lazy` and shared by all the
//! criteria that need it. The oracles reimplement quantities the library
//! computes — squared parallelepiped volume, pairwise ranking AUC — by
//! slower, structurally different algorithms.

#![allow(dead_code)]

use once_cell::sync::Lazy;

use divens::data::{synth_blobs, Dataset};
use divens::diversity::AdpConfig;
use divens::model::{Ensemble, MlpConfig};
use divens::training::{adp_train, TrainConfig};

/// Seeds used by every multi-seed criterion.
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Desk-scale data: 10 unit-sphere blob classes in 20 dimensions, split
/// into 4,000 train and 1,000 test examples.
pub fn blob_splits(seed: u64) -> (Dataset, Dataset) {
    synth_blobs(seed, 10, 20, 500, 0.08)
        .expect("blob parameters are valid")
        .split_per_class(400)
        .expect("500 per class splits into 400 + 100")
}

/// Trains a `k`-member ensemble with the given coefficients on `train`.
pub fn train_ensemble(seed: u64, k: usize, alpha: f64, beta: f64, train: &Dataset) -> Ensemble {
    let adp = AdpConfig::new(alpha, beta).expect("valid coefficients");
    let cfg = TrainConfig::new(40, seed, adp);
    let mlp = MlpConfig::new(20, 10).expect("valid architecture");
    let ens = Ensemble::init(mlp, k, seed).expect("fresh ensemble");
    let (ens, _report) = adp_train(ens, train, &cfg).expect("training completes");
    ens
}

/// Everything one seed contributes to the robustness criteria: the data
/// and three 3-member ensembles that differ only in their coefficients.
pub struct SeedBank {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    /// alpha = 0, beta = 0.
    pub baseline: Ensemble,
    /// alpha = 2, beta = 0.
    pub entropy_only: Ensemble,
    /// alpha = 2, beta = 0.5.
    pub full: Ensemble,
}

/// Three-member ensembles for five seeds.
pub static K3_BANK: Lazy<Vec<SeedBank>> = Lazy::new(|| {
    SEEDS
        .iter()
        .map(|&seed| {
            let (train, test) = blob_splits(seed);
            let baseline = train_ensemble(seed, 3, 0.0, 0.0, &train);
            let entropy_only = train_ensemble(seed, 3, 2.0, 0.0, &train);
            let full = train_ensemble(seed, 3, 2.0, 0.5, &train);
            SeedBank {
                seed,
                train,
                test,
                baseline,
                entropy_only,
                full,
            }
        })
        .collect()
});

/// One seed's five-member pair: baseline and regularized.
pub struct SeedBankWide {
    pub seed: u64,
    pub test: Dataset,
    pub baseline: Ensemble,
    pub full: Ensemble,
}

/// Five-member ensembles for five seeds (the member count does not divide
/// the number of residual classes here).
pub static K5_BANK: Lazy<Vec<SeedBankWide>> = Lazy::new(|| {
    SEEDS
        .iter()
        .map(|&seed| {
            let (train, test) = blob_splits(seed);
            let baseline = train_ensemble(seed, 5, 0.0, 0.0, &train);
            let full = train_ensemble(seed, 5, 2.0, 0.5, &train);
            SeedBankWide {
                seed,
                test,
                baseline,
                full,
            }
        })
        .collect()
});

/// Squared volume of the parallelepiped spanned by `cols`, computed by
/// modified Gram–Schmidt: the product of the squared norms of the
/// orthogonalized residuals. Independent of any determinant code.
pub fn gram_schmidt_squared_volume(cols: &[Vec<f64>]) -> f64 {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    let mut volume_sq = 1.0;
    for col in cols {
        let mut residual = col.clone();
        for b in &basis {
            let b_norm_sq: f64 = b.iter().map(|v| v * v).sum();
            if b_norm_sq == 0.0 {
                continue;
            }
            let coef: f64 =
                residual.iter().zip(b).map(|(r, v)| r * v).sum::<f64>() / b_norm_sq;
            for (r, v) in residual.iter_mut().zip(b) {
                *r -= coef * v;
            }
        }
        volume_sq *= residual.iter().map(|v| v * v).sum::<f64>();
        basis.push(residual);
    }
    volume_sq
}

/// O(n^2) ranking AUC: the probability that a random adversarial example
/// scores strictly below a random clean one, counting ties as half.
pub fn pairwise_auc(clean: &[f64], adversarial: &[f64]) -> f64 {
    let mut total = 0.0;
    for a in adversarial {
        for c in clean {
            total += if a < c {
                1.0
            } else if a == c {
                0.5
            } else {
                0.0
            };
        }
    }
    total / (clean.len() * adversarial.len()) as f64
}
